//! CSV and JSON artifact writers. Every CSV starts with a
//! `# config_sha256=<hex>` comment line followed by its header row.

use std::path::Path;

use serde::Serialize;

use crate::{CliError, Result};

/// Shortest decimal form that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv<R, I>(path: &Path, config_sha256: &str, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let mut out = format!("# config_sha256={config_sha256}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| CliError::Format { path: path.to_path_buf(), detail: e.to_string() };
        w.write_record(header).map_err(fail)?;
        for row in rows {
            let row: Vec<String> = row.into_iter().collect();
            if row.len() != header.len() {
                return Err(CliError::Format {
                    path: path.to_path_buf(),
                    detail: format!("row has {} fields, header has {}", row.len(), header.len()),
                });
            }
            w.write_record(&row).map_err(fail)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    ensure_parent(path)?;
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// Reads a CSV written by [`write_csv`], skipping the comment line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let fail = |e: csv::Error| CliError::Format { path: path.to_path_buf(), detail: e.to_string() };
    let header = r.headers().map_err(fail)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(fail)?;
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
