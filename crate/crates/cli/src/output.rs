//! Atomic file writes and CSV assembly.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

/// CSV with a fixed header; numbers use the shortest round-trip representation.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Table { w })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        self.w.write_record(values.iter().map(|v| v.to_string()))?;
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<u8>> {
        self.w.into_inner().map_err(|e| anyhow::anyhow!("csv flush: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn table_round_trips_floats() {
        let mut t = Table::new(&["a", "b"]).unwrap();
        let x = 0.1 + 0.2;
        t.row(&[x, 1e-300]).unwrap();
        let text = String::from_utf8(t.finish().unwrap()).unwrap();
        let line = text.lines().nth(1).unwrap();
        let got: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(got, vec![x, 1e-300]);
    }
}
