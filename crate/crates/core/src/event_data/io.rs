//! Line-oriented text formats.
//!
//! Event log: `patient_id \t event_name \t timestamp_hours`, one event per line.
//! Vocabulary: `event_name \t category \t target_flag` with the index given by
//! line order. Ground truth: `patient_id \t subpopulation`. Blank lines and
//! lines starting with `#` are ignored everywhere.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Category, DataError, EventSequence, EventVocabulary, RawEvent, RawEventLog, Result};

/// Name of the out-of-vocabulary marker written at the last window of every
/// exported sequence so that trailing empty windows survive a round trip.
pub const DISCHARGE_EVENT: &str = "DISCHARGE";

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_error(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse { line, message: message.into() }
}

/// Parses event-log text into one log per patient, in order of first appearance.
pub fn parse_event_log(text: &str) -> Result<Vec<RawEventLog>> {
    let mut logs: Vec<RawEventLog> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (line, l) in data_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_error(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (pid, name) = (fields[0], fields[1]);
        if pid.is_empty() || name.is_empty() {
            return Err(parse_error(line, "empty patient id or event name"));
        }
        let timestamp: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(line, format!("invalid timestamp {:?}", fields[2])))?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(parse_error(line, format!("timestamp must be finite and nonnegative, got {timestamp}")));
        }
        let idx = *slot.entry(pid.to_string()).or_insert_with(|| {
            logs.push(RawEventLog::new(pid, Vec::new()));
            logs.len() - 1
        });
        logs[idx].events.push(RawEvent { name: name.to_string(), timestamp });
    }
    for log in &mut logs {
        if !log.is_sorted() {
            log::warn!("patient {}: timestamps out of order, sorting", log.patient_id);
            log.events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
    }
    Ok(logs)
}

pub fn load_event_log(path: impl AsRef<Path>) -> Result<Vec<RawEventLog>> {
    parse_event_log(&fs::read_to_string(path)?)
}

pub fn save_event_log(path: impl AsRef<Path>, logs: &[RawEventLog]) -> Result<()> {
    let mut out = String::from("# patient_id\tevent_name\ttimestamp_hours\n");
    for log in logs {
        for e in &log.events {
            writeln!(out, "{}\t{}\t{}", log.patient_id, e.name, e.timestamp).unwrap();
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<EventVocabulary> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (line, l) in data_lines(&text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_error(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let category: Category = fields[1].parse().map_err(|e: String| parse_error(line, e))?;
        let flag = match fields[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_error(line, format!("target flag must be 0 or 1, got {other:?}"))),
        };
        entries.push((fields[0].to_string(), category, flag));
    }
    EventVocabulary::new(entries)
}

pub fn save_vocabulary(path: impl AsRef<Path>, vocab: &EventVocabulary) -> Result<()> {
    let mut out = String::from("# event_name\tcategory\ttarget_flag\n");
    for (e, &m) in vocab.entries().iter().zip(vocab.target_mask()) {
        writeln!(out, "{}\t{}\t{}", e.name, e.category, u8::from(m)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_ground_truth(path: impl AsRef<Path>, rows: &[(String, usize)]) -> Result<()> {
    let mut out = String::from("# patient_id\tsubpopulation\n");
    for (pid, s) in rows {
        writeln!(out, "{pid}\t{s}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(line, l)| {
            let (pid, s) = l.split_once('\t').ok_or_else(|| parse_error(line, "expected 2 fields"))?;
            let s = s.trim().parse().map_err(|_| parse_error(line, format!("invalid subpopulation {s:?}")))?;
            Ok((pid.to_string(), s))
        })
        .collect()
}

/// Renders discretized sequences back into timestamped logs.
///
/// Each active input slot of window `t` becomes one event at `t·W` plus a
/// seeded jitter inside the window; a [`DISCHARGE_EVENT`] marker is placed in
/// the last window. Discretizing the result with the same `W` reproduces the
/// inputs exactly.
pub fn sequences_to_logs(sequences: &[EventSequence], vocab: &EventVocabulary, seed: u64) -> Vec<RawEventLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sequences
        .iter()
        .map(|seq| {
            let w = seq.window_hours;
            let mut events = Vec::new();
            for (t, y) in seq.inputs.iter().enumerate() {
                let start = t as f64 * w;
                let mut window: Vec<RawEvent> = y
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| {
                        // hundredths of an hour, strictly inside the window
                        let ticks = (w * 100.0).floor().max(1.0) as u64;
                        let jitter = rng.random_range(0..ticks) as f64 / 100.0;
                        RawEvent { name: vocab.entry(i).name.clone(), timestamp: start + jitter }
                    })
                    .collect();
                if t + 1 == seq.len() {
                    window.push(RawEvent { name: DISCHARGE_EVENT.to_string(), timestamp: start + w / 2.0 });
                }
                window.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
                events.extend(window);
            }
            RawEventLog::new(seq.patient_id.clone(), events)
        })
        .collect()
}
