//! Plain-text rendering shared by tables and the CLI.

use std::fmt::Write as _;

/// Six significant digits, switching to exponent form for very large or small magnitudes.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if (-4..6).contains(&magnitude) {
        format!("{:.*}", (5 - magnitude).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

/// Column-aligned rows: numbers right-aligned, text left-aligned.
pub fn render_aligned<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut s = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| {
                if cell.parse::<f64>().is_ok() {
                    format!("{cell:>w$}")
                } else {
                    format!("{cell:<w$}")
                }
            })
            .collect();
        writeln!(s, "{}", line.join("  ").trim_end()).unwrap();
    }
    s
}
