//! Append-only NDJSON change log, one [`ChangeEvent`] per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ChangeEvent, StoreError};

pub struct Journal {
    out: BufWriter<File>,
}

impl Journal {
    pub fn append_to(path: &Path) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, events: &[ChangeEvent]) -> Result<(), StoreError> {
        for ev in events {
            serde_json::to_writer(&mut self.out, ev).map_err(std::io::Error::from)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<ChangeEvent>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| StoreError::CorruptJournal {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}
