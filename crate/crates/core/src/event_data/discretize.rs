use super::{DataError, EventSequence, EventVocabulary, RawEventLog, Result};

/// Output of [`discretize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub sequence: EventSequence,
    /// Events whose name is not in the vocabulary.
    pub skipped_unknown: usize,
}

/// Buckets a log into half-open windows `[t·W, (t+1)·W)`.
///
/// The sequence covers every window up to the one holding the last
/// timestamp, unknown events included, so a log ending in an out-of-vocabulary
/// marker (e.g. a discharge record) still fixes the sequence length.
pub fn discretize(log: &RawEventLog, vocab: &EventVocabulary, window_hours: f64) -> Result<Discretized> {
    if !(window_hours.is_finite() && window_hours > 0.0) {
        return Err(DataError::InvalidWindow(window_hours));
    }
    if log.events.is_empty() {
        return Err(DataError::EmptyLog(log.patient_id.clone()));
    }
    let mut last = 0.0f64;
    for e in &log.events {
        if !(e.timestamp.is_finite() && e.timestamp >= 0.0) {
            return Err(DataError::InvalidTimestamp { patient: log.patient_id.clone(), timestamp: e.timestamp });
        }
        last = last.max(e.timestamp);
    }
    let n_windows = window_of(last, window_hours) + 1;
    let mut inputs = vec![vec![0u8; vocab.len()]; n_windows];
    let mut skipped = 0;
    let mut known = 0;
    for e in &log.events {
        match vocab.index_of(&e.name) {
            Some(i) => {
                inputs[window_of(e.timestamp, window_hours)][i] = 1;
                known += 1;
            }
            None => skipped += 1,
        }
    }
    if known == 0 {
        return Err(DataError::NoKnownEvents(log.patient_id.clone()));
    }
    if skipped > 0 {
        log::debug!("patient {}: skipped {skipped} unknown events", log.patient_id);
    }
    let sequence = EventSequence::from_inputs(log.patient_id.clone(), inputs, vocab.target_indices(), window_hours);
    Ok(Discretized { sequence, skipped_unknown: skipped })
}

fn window_of(timestamp: f64, window_hours: f64) -> usize {
    (timestamp / window_hours).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_data::{Category, RawEvent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab_ab() -> EventVocabulary {
        EventVocabulary::new([("A", Category::Lab, true), ("B", Category::Medication, true)]).unwrap()
    }

    fn log(events: &[(&str, f64)]) -> RawEventLog {
        RawEventLog::new(
            "p1",
            events.iter().map(|&(n, t)| RawEvent { name: n.to_string(), timestamp: t }).collect(),
        )
    }

    #[test]
    fn duplicates_collapse_into_one_window() {
        let d = discretize(&log(&[("A", 1.0), ("A", 2.0), ("B", 30.0)]), &vocab_ab(), 24.0).unwrap();
        assert_eq!(d.sequence.inputs, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(d.sequence.targets, d.sequence.inputs);
    }

    #[test]
    fn single_event_at_zero_gives_one_window() {
        let d = discretize(&log(&[("B", 0.0)]), &vocab_ab(), 24.0).unwrap();
        assert_eq!(d.sequence.inputs, vec![vec![0, 1]]);
    }

    #[test]
    fn boundary_event_belongs_to_later_window() {
        let d = discretize(&log(&[("A", 0.5), ("B", 24.0)]), &vocab_ab(), 24.0).unwrap();
        assert_eq!(d.sequence.inputs, vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn unknown_events_are_counted_and_extend_length() {
        let d = discretize(&log(&[("A", 0.5), ("Z", 50.0)]), &vocab_ab(), 24.0).unwrap();
        assert_eq!(d.skipped_unknown, 1);
        assert_eq!(d.sequence.inputs, vec![vec![1, 0], vec![0, 0], vec![0, 0]]);
    }

    #[test]
    fn errors() {
        assert!(matches!(discretize(&log(&[]), &vocab_ab(), 24.0), Err(DataError::EmptyLog(_))));
        assert!(matches!(discretize(&log(&[("Z", 1.0)]), &vocab_ab(), 24.0), Err(DataError::NoKnownEvents(_))));
        assert!(matches!(discretize(&log(&[("A", 1.0)]), &vocab_ab(), 0.0), Err(DataError::InvalidWindow(_))));
    }

    fn random_log(rng: &mut ChaCha8Rng, n: usize, names: &[&str]) -> RawEventLog {
        let mut events: Vec<RawEvent> = (0..n)
            .map(|_| RawEvent {
                name: names[rng.random_range(0..names.len())].to_string(),
                timestamp: (rng.random_range(0.0..200.0f64) * 4.0).round() / 4.0,
            })
            .collect();
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        RawEventLog::new("r", events)
    }

    /// Scans every (event, window) pair.
    fn brute_force(log: &RawEventLog, vocab: &EventVocabulary, w: f64) -> Vec<Vec<u8>> {
        let last = log.events.iter().map(|e| e.timestamp).fold(0.0, f64::max);
        let mut n = 0;
        while (n as f64) * w <= last {
            n += 1;
        }
        let mut out = vec![vec![0u8; vocab.len()]; n];
        for (t, row) in out.iter_mut().enumerate() {
            let (lo, hi) = (t as f64 * w, (t + 1) as f64 * w);
            for e in &log.events {
                if let Some(i) = vocab.index_of(&e.name) {
                    if e.timestamp >= lo && e.timestamp < hi {
                        row[i] = 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_bucketing() {
        let vocab = EventVocabulary::new([
            ("A", Category::Lab, true),
            ("B", Category::Medication, true),
            ("C", Category::Procedure, false),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let l = random_log(&mut rng, 50, &["A", "B", "C", "X"]);
            if l.events.iter().all(|e| e.name == "X") {
                continue;
            }
            let d = discretize(&l, &vocab, 24.0).unwrap();
            assert_eq!(d.sequence.inputs, brute_force(&l, &vocab, 24.0));
        }
    }

    #[test]
    fn halving_the_window_refines_the_coarse_vectors() {
        let vocab = vocab_ab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let l = random_log(&mut rng, 30, &["A", "B"]);
            let coarse = discretize(&l, &vocab, 24.0).unwrap().sequence.inputs;
            let fine = discretize(&l, &vocab, 12.0).unwrap().sequence.inputs;
            for (t, row) in coarse.iter().enumerate() {
                let merged: Vec<u8> = (0..vocab.len())
                    .map(|i| {
                        let a = fine.get(2 * t).map_or(0, |r| r[i]);
                        let b = fine.get(2 * t + 1).map_or(0, |r| r[i]);
                        a | b
                    })
                    .collect();
                assert_eq!(&merged, row);
            }
            // indicator total never exceeds the number of distinct (type, window) pairs
            let ones: usize = coarse.iter().flatten().map(|&x| x as usize).sum();
            let mut pairs: Vec<(String, usize)> =
                l.events.iter().map(|e| (e.name.clone(), (e.timestamp / 24.0) as usize)).collect();
            pairs.sort();
            pairs.dedup();
            assert!(ones <= pairs.len());
        }
    }
}
