//! Plain-file emitters: CSV tables, SVG heatmaps, PGM rasters. No plotting
//! dependencies; everything is written byte-deterministically.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Shortest decimal form that parses back to the identical f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Comma-separated values with a header row and LF line endings.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{}", header.join(",")).unwrap();
    for row in rows {
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    write_file(path, &s)
}

/// A labeled matrix as CSV: first column holds row labels, the corner cell
/// names the row dimension.
pub fn write_matrix_csv(
    path: &Path,
    corner: &str,
    col_labels: &[String],
    row_labels: &[String],
    matrix: &[Vec<f64>],
) -> Result<()> {
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    let rows: Vec<Vec<String>> = row_labels
        .iter()
        .zip(matrix)
        .map(|(label, row)| {
            let mut cells = vec![label.clone()];
            cells.extend(row.iter().map(|v| fmt_f64(*v)));
            cells
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// How matrix values map to colors.
pub enum ColorScale {
    /// Blue below zero, white at zero, red above; `limit` is full
    /// saturation.
    Diverging { limit: f64 },
    /// White at `min`, blue at `max`.
    Sequential { min: f64, max: f64 },
}

fn cell_color(scale: &ColorScale, v: f64) -> String {
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    match scale {
        ColorScale::Diverging { limit } => {
            let t = (v / limit.max(1e-12)).clamp(-1.0, 1.0);
            if t < 0.0 {
                let s = -t;
                format!(
                    "rgb({},{},{})",
                    lerp(255.0, 33.0, s),
                    lerp(255.0, 102.0, s),
                    lerp(255.0, 172.0, s)
                )
            } else {
                format!(
                    "rgb({},{},{})",
                    lerp(255.0, 178.0, t),
                    lerp(255.0, 24.0, t),
                    lerp(255.0, 43.0, t)
                )
            }
        }
        ColorScale::Sequential { min, max } => {
            let span = (max - min).max(1e-12);
            let t = ((v - min) / span).clamp(0.0, 1.0);
            format!(
                "rgb({},{},{})",
                lerp(255.0, 8.0, t),
                lerp(255.0, 81.0, t),
                lerp(255.0, 156.0, t)
            )
        }
    }
}

fn text_color(scale: &ColorScale, v: f64) -> &'static str {
    let strong = match scale {
        ColorScale::Diverging { limit } => (v / limit.max(1e-12)).abs() > 0.55,
        ColorScale::Sequential { min, max } => (v - min) / (max - min).max(1e-12) > 0.55,
    };
    if strong {
        "#ffffff"
    } else {
        "#1a1a1a"
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A labeled heatmap as a standalone SVG file.
pub fn write_svg_heatmap(
    path: &Path,
    title: &str,
    matrix: &[Vec<f64>],
    row_labels: &[String],
    col_labels: &[String],
    scale: &ColorScale,
) -> Result<()> {
    let cell = 44.0;
    let left = 110.0;
    let top = 58.0;
    let cols = col_labels.len();
    let rows = row_labels.len();
    let width = left + cell * cols as f64 + 18.0;
    let height = top + cell * rows as f64 + 26.0;

    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">"
    )
    .unwrap();
    writeln!(
        s,
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>"
    )
    .unwrap();
    writeln!(
        s,
        "  <text x=\"{}\" y=\"20\" font-size=\"14\" fill=\"#1a1a1a\">{}</text>",
        left,
        xml_escape(title)
    )
    .unwrap();
    for (j, label) in col_labels.iter().enumerate() {
        writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#1a1a1a\">{}</text>",
            left + cell * (j as f64 + 0.5),
            top - 8.0,
            xml_escape(label)
        )
        .unwrap();
    }
    for (i, label) in row_labels.iter().enumerate() {
        writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"#1a1a1a\">{}</text>",
            left - 8.0,
            top + cell * (i as f64 + 0.5) + 4.0,
            xml_escape(label)
        )
        .unwrap();
    }
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let x = left + cell * j as f64;
            let y = top + cell * i as f64;
            writeln!(
                s,
                "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\" stroke=\"#dddddd\"/>",
                cell_color(scale, v)
            )
            .unwrap();
            writeln!(
                s,
                "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" \
                 fill=\"{}\">{:+.2}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 3.5,
                text_color(scale, v),
                v
            )
            .unwrap();
        }
    }
    writeln!(s, "</svg>").unwrap();
    write_file(path, &s)
}

/// Grayscale PGM (P2) of a `[1, H, W]` image; values clamp to `[0, 1]`.
pub fn write_pgm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let shape = image.shape();
    debug_assert_eq!(shape.len(), 3);
    let (h, w) = (shape[1], shape[2]);
    let mut s = String::new();
    writeln!(s, "P2").unwrap();
    writeln!(s, "{w} {h}").unwrap();
    writeln!(s, "255").unwrap();
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let v = image.data()[y * w + x].as_f64().clamp(0.0, 1.0);
                ((v * 255.0).round() as u32).to_string()
            })
            .collect();
        writeln!(s, "{}", row.join(" ")).unwrap();
    }
    write_file(path, &s)
}
