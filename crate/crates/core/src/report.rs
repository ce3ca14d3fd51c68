//! Plain CSV text with a fixed number format, so identical inputs always
//! give identical bytes.

use std::fmt::Write;

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // avoid "-0" differences between runs that land on signed zeros
        return format!("{:.16e}", 0.0);
    }
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut text = String::new();
        let cols: Vec<&str> = header.iter().map(AsRef::as_ref).collect();
        text.push_str(&cols.join(","));
        text.push('\n');
        Self { text, columns: cols.len() }
    }

    /// Appends a row of already formatted cells.
    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.columns, "row width must match the header");
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            self.text.push_str(c.as_ref());
        }
        self.text.push('\n');
    }

    /// Appends a row of numbers.
    pub fn numbers(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns, "row width must match the header");
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{}", fmt_f64(*v));
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Parses a CSV produced by [`Csv`] back into a header and numeric rows;
/// non-numeric cells become NaN.
pub fn parse_numeric(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect()).collect();
    (header, rows)
}
