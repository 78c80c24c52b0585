//! Small shared helpers: stable hashing, checksums and versioned TSV files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_from(0xcbf2_9ce4_8422_2325, bytes)
}

/// Continue an FNV-1a hash from `state`, so hashing a concatenation needs no buffer.
pub fn fnv1a_from(state: u64, bytes: &[u8]) -> u64 {
    let mut hash = state;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Header line written at the top of every text artifact.
pub fn version_header(kind: &str) -> String {
    format!("#qr {kind} v1")
}

/// Write `header` followed by `lines` (each without trailing newline).
pub fn write_lines<I, S>(path: &Path, header: &str, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        writeln!(out, "{header}")?;
        for line in lines {
            writeln!(out, "{}", line.as_ref())?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Read a versioned text artifact. Returns `(line_number, line)` for every
/// non-empty data line; the header must match `kind` exactly.
pub fn read_versioned(path: &Path, kind: &str) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let expected = version_header(kind);
    match lines.next() {
        Some((_, first)) if first.trim_end() == expected => {}
        Some((_, first)) => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{expected}`, found `{first}`"),
            ))
        }
        None => return Err(Error::parse(path, 1, format!("missing header `{expected}`"))),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Split a TSV line into exactly `n` fields.
pub fn split_fields<'a>(path: &Path, line_no: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {n} tab-separated fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

pub fn parse_field<T: std::str::FromStr>(path: &Path, line_no: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line_no, format!("invalid {what}: `{field}`")))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn versioned_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsv");
        write_lines(&path, &version_header("thing"), ["a\tb", "c\td"]).unwrap();
        let lines = read_versioned(&path, "thing").unwrap();
        assert_eq!(lines, vec![(2, "a\tb".to_string()), (3, "c\td".to_string())]);
        assert!(read_versioned(&path, "other").is_err());
    }
}
