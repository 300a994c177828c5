//! Whole-file atomic artifact writes and small CSV helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Serializes `rows` as CSV, optionally preceded by `# ` comment lines.
pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str], comments: &[&str]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in comments {
        out.extend_from_slice(b"# ");
        out.extend_from_slice(c.as_bytes());
        out.push(b'\n');
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str], comments: &[&str]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows, header, comments)?)
}

/// Reads a CSV written by [`write_csv`], skipping `#` comment lines.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
        value_nm: f64,
    }

    #[test]
    fn csv_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let rows = vec![Row { id: 1, value_nm: 2.5 }, Row { id: 2, value_nm: -0.125 }];
        write_csv(&path, &rows, &["id", "value_nm"], &["sign: positive up"]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# sign: positive up\nid,value_nm\n"));
        let back: Vec<Row> = read_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn empty_csv_has_header_only() {
        let bytes = csv_bytes::<Row>(&[], &["id", "value_nm"], &[]).unwrap();
        assert_eq!(bytes, b"id,value_nm\n");
    }
}
