//! Append-only JSON-lines event log.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::event::InteractionEvent;
use crate::ServiceError;

/// File handle for appends. Each append is synced before it returns, so an
/// acknowledged event survives a crash.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    len: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}

/// Events of a log text and the byte length of the part they came from.
///
/// A last line without a newline that does not parse is a torn append from a
/// crash and is left out. Any other unreadable line is an error.
fn parse(text: &str, path: &Path) -> Result<(Vec<InteractionEvent>, usize), ServiceError> {
    let mut events = Vec::new();
    let mut good = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        match serde_json::from_str::<InteractionEvent>(line.trim_end()) {
            Ok(ev) => events.push(ev),
            Err(_) if line.trim().is_empty() => {}
            Err(_) if !complete => {
                log::warn!("{}: ignoring torn final line {}", path.display(), i + 1);
                break;
            }
            Err(e) => return Err(ServiceError::Storage(format!("{} line {}: {e}", path.display(), i + 1))),
        }
        good += line.len();
    }
    Ok((events, good))
}

impl EventLog {
    /// Opens or creates the log and returns the events already in it. A torn
    /// final line is cut off so later appends start on a fresh line.
    pub fn open(path: &Path) -> Result<(Self, Vec<InteractionEvent>), ServiceError> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| io_err(path, e))?;
        let (events, mut good) = parse(&text, path)?;
        if good < text.len() {
            file.set_len(good as u64).map_err(|e| io_err(path, e))?;
        }
        if good > 0 && !text[..good].ends_with('\n') {
            // complete last record without its newline
            file.write_all(b"\n").map_err(|e| io_err(path, e))?;
            good += 1;
        }
        if good != text.len() {
            file.sync_all().map_err(|e| io_err(path, e))?;
        }
        let len = events.len();
        Ok((Self { path: path.to_path_buf(), file, len }, events))
    }

    pub fn append(&mut self, event: &InteractionEvent) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))?;
        self.file.sync_data().map_err(|e| io_err(&self.path, e))?;
        self.len += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every event of a log file without opening it for writing.
pub fn read_log(path: &Path) -> Result<Vec<InteractionEvent>, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(parse(&text, path)?.0)
}
