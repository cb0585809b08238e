//! JSON-lines episode logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::episode::TickRecord;
use crate::error::{Error, Result};

pub fn write_jsonl<W: Write>(records: &[TickRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_jsonl_string(records: &[TickRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Reads one record per non-blank line; errors name the offending line.
pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<TickRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

pub fn save_log(records: &[TickRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, BufWriter::new(File::create(path)?))
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<TickRecord>> {
    read_jsonl(File::open(path)?)
}
