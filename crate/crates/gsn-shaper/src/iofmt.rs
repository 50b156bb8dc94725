//! Text formatting shared by every artifact writer.
//!
//! All floating-point output goes through [`fmt_f64`] so that identical runs
//! produce byte-identical files: 17 significant digits round-trip any f64
//! exactly, and a fixed exponent form leaves no room for locale or shortest-
//! representation drift.

/// Render an f64 with 17 significant digits in exponent form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Join one CSV row; fields must not contain commas or newlines.
pub fn csv_row<S: AsRef<str>>(fields: &[S]) -> String {
    fields
        .iter()
        .map(|f| f.as_ref())
        .collect::<Vec<_>>()
        .join(",")
}
