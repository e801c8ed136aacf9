//! Alignment-matrix export: CSV with 6 significant digits and an 8-bit
//! binary PGM image with speech frames on the horizontal axis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn six_digits(v: f64) -> String {
    format!("{v:.5e}")
}

/// One line per speech frame, one column per grapheme, 6 significant
/// digits. In a row-stochastic row the largest entry absorbs the rounding
/// of the others, so parsed rows still sum to 1 within 1e-6.
pub fn w12_to_csv(w12: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..w12.rows() {
        let row = w12.row(r);
        let mut fields: Vec<String> = row.iter().map(|&v| six_digits(v)).collect();
        let sum: f64 = row.iter().sum();
        if !row.is_empty() && (sum - 1.0).abs() < 1e-9 {
            let top = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            let rest: f64 = fields
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != top)
                .map(|(_, f)| f.parse::<f64>().expect("formatted float parses"))
                .sum();
            fields[top] = six_digits(1.0 - rest);
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn parse_csv_matrix(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data {
                line: i + 1,
                message: e.to_string(),
            })?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Binary PGM of `w12` (n1×n2). Pixel value is `round(255·w)`; the image is
/// n1 pixels wide (speech frames, left to right) and n2 pixels tall
/// (graphemes, top to bottom).
pub fn w12_to_pgm(w12: &Matrix) -> Vec<u8> {
    let (n1, n2) = w12.shape();
    let mut out = format!("P5 {n1} {n2} 255\n").into_bytes();
    for j in 0..n2 {
        for i in 0..n1 {
            out.push((255.0 * w12[(i, j)].clamp(0.0, 1.0)).round() as u8);
        }
    }
    out
}

/// Inverse of [`w12_to_pgm`] for the header form it writes: returns the
/// n1×n2 matrix of pixel values scaled back to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Matrix> {
    let bad = |m: &str| Error::InvalidInput(format!("pgm: {m}"));
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| bad("header is not text"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected `P5 <width> <height> 255`"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = &bytes[newline + 1..];
    if pixels.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    let mut m = Matrix::zeros(width, height);
    for j in 0..height {
        for i in 0..width {
            m[(i, j)] = pixels[j * width + i] as f64 / 255.0;
        }
    }
    Ok(m)
}

/// Writes `<prefix>.w12.csv` and `<prefix>.w12.pgm`.
pub fn export_alignment(w12: &Matrix, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let base = prefix.as_os_str().to_string_lossy().into_owned();
    let csv = PathBuf::from(format!("{base}.w12.csv"));
    let pgm = PathBuf::from(format!("{base}.w12.pgm"));
    std::fs::write(&csv, w12_to_csv(w12))?;
    std::fs::write(&pgm, w12_to_pgm(w12))?;
    Ok((csv, pgm))
}
