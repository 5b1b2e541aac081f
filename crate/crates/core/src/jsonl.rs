//! JSON-lines helpers shared by every file format in the pipeline.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

fn invalid(line: usize, e: serde_json::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {e}"))
}

/// Reads every non-blank line of `path` as one `T`.
pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> io::Result<Vec<T>> {
    read_from(BufReader::new(File::open(path)?))
}

pub fn read_from<T: DeserializeOwned>(r: impl BufRead) -> io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| invalid(i + 1, e))?);
    }
    Ok(out)
}

pub fn write<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, items)?;
    w.flush()
}

pub fn write_to<'a, T: Serialize + 'a>(
    w: &mut impl Write,
    items: impl IntoIterator<Item = &'a T>,
) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
