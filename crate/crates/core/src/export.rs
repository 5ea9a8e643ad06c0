//! CSV and 8-bit PGM export of matrices for inspection.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Formats a value with 9 significant digits.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes a matrix as row-major CSV, 9 significant digits per entry.
pub fn write_matrix_csv(mut w: impl Write, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| fmt_sig9(m.at(i, j))).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parses a numeric CSV matrix (no header).
pub fn read_matrix_csv(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad number {c:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("CSV matrix has no rows".into()));
    }
    Tensor::from_rows(&rows)
}

/// Writes a binary 8-bit PGM, mapping `[lo, hi]` linearly onto `[0, 255]`.
pub fn write_pgm(mut w: impl Write, m: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    if !(hi > lo) {
        return Err(Error::Argument(format!("empty PGM range [{lo}, {hi}]")));
    }
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> =
        m.data().iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Heatmap of a similarity matrix, `[-1, 1] -> [0, 255]`.
pub fn write_similarity_pgm(w: impl Write, m: &Tensor) -> Result<()> {
    write_pgm(w, m, -1.0, 1.0)
}

/// Heatmap of a signed gradient map, `[-g_max, g_max] -> [0, 255]`.
pub fn write_signed_pgm(w: impl Write, m: &Tensor) -> Result<()> {
    let g = m.data().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let g = if g > 0.0 { g } else { 1.0 };
    write_pgm(w, m, -g, g)
}
