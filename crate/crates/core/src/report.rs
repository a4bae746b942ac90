//! Run artifacts: atomic file writes, the run manifest, and SVG charts drawn
//! from CSV text.
//!
//! Charts take the CSV bytes as their only data input, so a chart can always
//! be regenerated from the CSV it sits next to.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textfmt::FlatFile;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Collects what a CSV writer emits into memory.
pub fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance record written before any other output of a command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tool_version: String,
    /// SHA-256 of the environment file text.
    pub env_fingerprint: String,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        seed: u64,
        output_dir: &Path,
        env_text: &[u8],
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            output_dir: output_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            env_fingerprint: fingerprint(env_text),
        }
    }

    pub fn to_flat(&self) -> FlatFile {
        let mut f = FlatFile::new();
        f.set("command", &self.command);
        f.set(
            "config_path",
            self.config_path
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        f.set("seed", self.seed);
        f.set("output_dir", self.output_dir.display());
        f.set("tool_version", &self.tool_version);
        f.set("env_fingerprint", &self.env_fingerprint);
        f
    }

    pub fn from_flat(f: &FlatFile) -> Result<Self> {
        let config_path = f.require("config_path")?;
        Ok(RunManifest {
            command: f.require("command")?.to_string(),
            config_path: (!config_path.is_empty()).then(|| PathBuf::from(config_path)),
            seed: f
                .parse_value("seed")?
                .ok_or_else(|| Error::parse(None, "missing key `seed`"))?,
            output_dir: PathBuf::from(f.require("output_dir")?),
            tool_version: f.require("tool_version")?.to_string(),
            env_fingerprint: f.require("env_fingerprint")?.to_string(),
        })
    }

    pub fn write(&self) -> Result<()> {
        write_atomic(
            &self.output_dir.join(Self::FILE_NAME),
            self.to_flat().to_text().as_bytes(),
        )
    }
}

/// A CSV file read strictly: header required, every row the header's width.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes);
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::parse(Some(1), "missing CSV header"));
        }
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(CsvTable { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(None, format!("missing CSV column `{name}`")))
    }

    /// Numeric column; empty cells and `NaN` become NaN.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let cell = row[i].trim();
                if cell.is_empty() {
                    return Ok(f64::NAN);
                }
                cell.parse::<f64>()
                    .map_err(|e| Error::parse(Some(r + 2), format!("column `{name}`: {e}")))
            })
            .collect()
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|row| row[i].clone()).collect())
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_lo: f64, y_hi: f64) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#,
        x0 - 4.0,
        y0,
        y_lo
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#,
        x0 - 4.0,
        y1 + 4.0,
        y_hi
    );
}

/// Line chart of `y_col` against `x_col`. Non-finite points are skipped.
pub fn line_chart_svg(csv: &[u8], x_col: &str, y_col: &str, title: &str) -> Result<String> {
    let table = CsvTable::parse(csv)?;
    let xs = table.numbers(x_col)?;
    let ys = table.numbers(y_col)?;
    let points: Vec<(f64, f64)> = xs
        .into_iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x_lo, x_hi) = range(points.iter().map(|p| p.0));
    let (y_lo, y_hi) = range(points.iter().map(|p| p.1));
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (WIDTH - LEFT - RIGHT);
    let py = |y: f64| HEIGHT - BOTTOM - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - TOP - BOTTOM);

    let mut s = svg_open(title);
    axes(&mut s, x_col, y_col, y_lo, y_hi);
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{}" text-anchor="middle">{:.4}</text>"#,
        HEIGHT - BOTTOM + 16.0,
        x_lo
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{:.4}</text>"#,
        WIDTH - RIGHT,
        HEIGHT - BOTTOM + 16.0,
        x_hi
    );
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        coords.join(" ")
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart with one bar per row kept by `keep`, labeled by `label_col`.
pub fn bar_chart_svg(
    csv: &[u8],
    label_col: &str,
    value_col: &str,
    title: &str,
    keep: impl Fn(&CsvTable, usize) -> bool,
) -> Result<String> {
    let table = CsvTable::parse(csv)?;
    let labels = table.strings(label_col)?;
    let values = table.numbers(value_col)?;
    let bars: Vec<(String, f64)> = (0..table.rows.len())
        .filter(|&i| keep(&table, i))
        .map(|i| (labels[i].clone(), values[i]))
        .collect();
    let (mut lo, mut hi) = range(bars.iter().map(|b| b.1));
    lo = lo.min(0.0);
    hi = hi.max(0.0);
    let py = |y: f64| HEIGHT - BOTTOM - (y - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM);
    let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;

    let mut s = svg_open(title);
    axes(&mut s, label_col, value_col, lo, hi);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.15);
        let cx = LEFT + slot * (i as f64 + 0.5);
        if v.is_finite() {
            let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
                x,
                top,
                slot * 0.7,
                bottom - top
            );
            let _ = writeln!(
                s,
                r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{v:.4}</text>"#,
                top - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
