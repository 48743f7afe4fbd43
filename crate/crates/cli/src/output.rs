//! Number formatting, table assembly and atomic writes.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn full(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

/// 4 significant digits for human-facing summaries.
pub fn short(x: f64) -> String {
    if !x.is_finite() {
        return full(x);
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&magnitude) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// First line of every output file.
pub fn header_line(seed: Option<u64>, config: &impl Serialize) -> String {
    let json = serde_json::to_string(config).expect("configs serialize");
    let seed = seed.map_or("none".to_string(), |s| s.to_string());
    format!("# mziln {} seed={seed} config={json}", env!("CARGO_PKG_VERSION"))
}

/// A tab-separated table under a `#` header line.
pub struct Tsv {
    text: String,
}

impl Tsv {
    pub fn new(header: &str, columns: &[&str]) -> Self {
        let mut text = String::new();
        writeln!(text, "{header}").unwrap();
        writeln!(text, "{}", columns.join("\t")).unwrap();
        Self { text }
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        let line: Vec<&str> = fields.iter().map(AsRef::as_ref).collect();
        writeln!(self.text, "{}", line.join("\t")).unwrap();
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_precision_round_trips() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(full(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(full(0.1), "1.0000000000000001e-1");
        assert_eq!(full(f64::NAN), "NA");
    }

    #[test]
    fn short_keeps_four_digits() {
        assert_eq!(short(0.70588235), "0.7059");
        assert_eq!(short(94.7368), "94.74");
        assert_eq!(short(-0.0004123), "-0.0004123");
        assert_eq!(short(1234.56), "1235");
        assert_eq!(short(0.0), "0");
        assert_eq!(short(2.5e-7), "2.500e-7");
    }
}
