//! CSV formats for prediction records and switch traces.
//!
//! Records: `patient_id,step,strategy,event_index,score,label`, one line per
//! (patient, step, strategy, event). Traces:
//! `patient_id,step,loss_P,loss_S,loss_I,loss_C,chosen`. Event choices:
//! `patient_id,step,<one column per target event>`. Floats use the shortest
//! representation that round-trips exactly; infinite losses are `inf`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{file_err, PipelineError, Result};
use crate::evaluation::PredictionRecord;
use crate::event_data::EventVocabulary;
use crate::switching::{ModelLabel, SwitchStep, SwitchTrace};

pub(crate) fn write_records_header(w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "patient_id,step,strategy,event_index,score,label")
}

pub fn write_records(w: &mut impl Write, records: &[PredictionRecord]) -> io::Result<()> {
    for r in records {
        for (j, (s, y)) in r.scores.iter().zip(&r.target).enumerate() {
            writeln!(w, "{},{},{},{j},{s},{y}", r.patient_id, r.step, r.strategy)?;
        }
    }
    Ok(())
}

pub(crate) fn write_traces_header(w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "patient_id,step,loss_P,loss_S,loss_I,loss_C,chosen")
}

pub fn write_traces(w: &mut impl Write, traces: &[SwitchTrace]) -> io::Result<()> {
    for tr in traces {
        for s in &tr.steps {
            let [p, sp, i, c] = s.losses;
            writeln!(w, "{},{},{p},{sp},{i},{c},{}", tr.patient_id, s.step, s.chosen)?;
        }
    }
    Ok(())
}

pub(crate) fn write_event_choices_header(w: &mut impl Write, vocab: &EventVocabulary) -> io::Result<()> {
    write!(w, "patient_id,step")?;
    for j in 0..vocab.n_targets() {
        write!(w, ",{}", vocab.target_entry(j).name)?;
    }
    writeln!(w)
}

pub fn write_event_choices(w: &mut impl Write, traces: &[SwitchTrace]) -> io::Result<()> {
    for tr in traces {
        for s in &tr.steps {
            write!(w, "{},{}", tr.patient_id, s.step)?;
            for l in &s.event_choices {
                write!(w, ",{l}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

struct Lines<'a> {
    path: &'a Path,
}

impl Lines<'_> {
    fn err(&self, line: usize, message: impl Into<String>) -> PipelineError {
        PipelineError::Format { path: self.path.to_path_buf(), line, message: message.into() }
    }

    /// Splits off the last `n` comma-separated fields; the rest is the
    /// patient id, which may itself contain commas.
    fn fields<'l>(&self, line_no: usize, line: &'l str, n: usize) -> Result<(&'l str, Vec<&'l str>)> {
        let mut parts: Vec<&str> = line.rsplitn(n + 1, ',').collect();
        if parts.len() != n + 1 {
            return Err(self.err(line_no, format!("expected {} fields", n + 1)));
        }
        let pid = parts.pop().expect("checked length");
        parts.reverse();
        Ok((pid, parts))
    }

    fn parse<T: std::str::FromStr>(&self, line_no: usize, what: &str, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(line_no, format!("bad {what} {s:?}")))
    }
}

fn read_body(path: &Path, header: &str) -> Result<String> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    match text.lines().next() {
        Some(h) if h == header => Ok(text),
        _ => Err(PipelineError::Format { path: path.to_path_buf(), line: 1, message: format!("expected header {header:?}") }),
    }
}

pub fn read_records(path: impl AsRef<Path>, n_target: usize) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = read_body(path, "patient_id,step,strategy,event_index,score,label")?;
    let p = Lines { path };
    let mut out: Vec<PredictionRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        let (pid, f) = p.fields(n, line, 5)?;
        let step: usize = p.parse(n, "step", f[0])?;
        let strategy = f[1].parse().map_err(|e: String| p.err(n, e))?;
        let j: usize = p.parse(n, "event index", f[2])?;
        let score: f64 = p.parse(n, "score", f[3])?;
        let label: u8 = p.parse(n, "label", f[4])?;
        if !(0.0..=1.0).contains(&score) || label > 1 {
            return Err(p.err(n, "score must lie in [0, 1] and label in {0, 1}"));
        }
        let continues = out
            .last()
            .is_some_and(|r| r.patient_id == pid && r.step == step && r.strategy == strategy && r.scores.len() < n_target);
        if !continues {
            if out.last().is_some_and(|r| r.scores.len() != n_target) {
                return Err(p.err(n, "previous record is incomplete"));
            }
            out.push(PredictionRecord { patient_id: pid.to_string(), step, strategy, scores: Vec::new(), target: Vec::new() });
        }
        let r = out.last_mut().expect("just pushed");
        if j != r.scores.len() {
            return Err(p.err(n, format!("expected event index {}, got {j}", r.scores.len())));
        }
        r.scores.push(score);
        r.target.push(label);
    }
    if out.last().is_some_and(|r| r.scores.len() != n_target) {
        return Err(p.err(text.lines().count(), "last record is incomplete"));
    }
    Ok(out)
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<SwitchTrace>> {
    let path = path.as_ref();
    let text = read_body(path, "patient_id,step,loss_P,loss_S,loss_I,loss_C,chosen")?;
    let p = Lines { path };
    let mut out: Vec<SwitchTrace> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let n = i + 1;
        let (pid, f) = p.fields(n, line, 6)?;
        let step = p.parse(n, "step", f[0])?;
        let mut losses = [0.0; 4];
        for (l, s) in losses.iter_mut().zip(&f[1..5]) {
            *l = p.parse(n, "loss", s)?;
        }
        let chosen: ModelLabel = f[5].parse().map_err(|e: String| p.err(n, e))?;
        if out.last().is_none_or(|t| t.patient_id != pid) {
            out.push(SwitchTrace { patient_id: pid.to_string(), steps: Vec::new() });
        }
        out.last_mut()
            .expect("just pushed")
            .steps
            .push(SwitchStep { step, losses, chosen, event_choices: Vec::new(), event_criteria: Vec::new() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::switching::Strategy;

    #[test]
    fn records_round_trip() {
        let recs = vec![
            PredictionRecord {
                patient_id: "a,b".into(),
                step: 1,
                strategy: Strategy::MetaSwitchEvent,
                scores: vec![0.1, 1.0 / 3.0],
                target: vec![0, 1],
            },
            PredictionRecord {
                patient_id: "a,b".into(),
                step: 1,
                strategy: Strategy::GruPop,
                scores: vec![1e-12, 0.999],
                target: vec![1, 1],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut buf = Vec::new();
        write_records_header(&mut buf).unwrap();
        write_records(&mut buf, &recs).unwrap();
        fs::write(&path, &buf).unwrap();
        assert_eq!(read_records(&path, 2).unwrap(), recs);
        assert!(matches!(read_records(&path, 3), Err(PipelineError::Format { .. })));
    }

    #[test]
    fn traces_round_trip() {
        let tr = SwitchTrace {
            patient_id: "x".into(),
            steps: vec![
                SwitchStep { step: 1, losses: [f64::INFINITY; 4], chosen: ModelLabel::P, event_choices: vec![], event_criteria: vec![] },
                SwitchStep { step: 2, losses: [0.5, 0.25, 0.125, 1.0], chosen: ModelLabel::I, event_choices: vec![], event_criteria: vec![] },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut buf = Vec::new();
        write_traces_header(&mut buf).unwrap();
        write_traces(&mut buf, std::slice::from_ref(&tr)).unwrap();
        fs::write(&path, &buf).unwrap();
        assert_eq!(read_traces(&path).unwrap(), vec![tr]);
    }
}
