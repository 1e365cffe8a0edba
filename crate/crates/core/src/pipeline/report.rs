//! Report tables written by `report`.
//!
//! | file | columns |
//! |---|---|
//! | `table1.csv` | `strategy,auprc_micro,auprc_macro,n_instances` |
//! | `per_step.csv` | `strategy,step,n_patients,auprc` |
//! | `per_event.csv` | `strategy,event_index,event,category,n_positive,auprc` |
//! | `per_category.csv` | `strategy,category,n_events,auprc_macro,auprc_micro` |
//! | `repetitive.csv` | `strategy,repetitive_auprc,non_repetitive_auprc,n_repetitive,n_non_repetitive` |
//! | `selection_ratio.csv` | `step,n_patients,P,S,I,C` |
//! | `gain.csv` | `event_index,event,auprc_a,auprc_b,gain_pct,occurrence` (GRU-POP vs Meta-Switch-Event) |
//! | `excluded_events.csv` | `strategy,event_index,event` (no positives, left out of macro averages) |
//! | `summary.json` | strategy → metric → value |
//!
//! Undefined AUPRC values appear as `nan` in CSV and `null` in JSON.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{file_err, Result};
use crate::evaluation::{
    evaluate_strategies, occurrence_rates, performance_gain_table, selection_ratio, split_repetitive, GainRow,
    MetricReport, PredictionRecord, SelectionRatio,
};
use crate::event_data::{EventSequence, EventVocabulary};
use crate::switching::{ModelLabel, Strategy, SwitchTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitiveRow {
    pub repetitive_auprc: f64,
    pub non_repetitive_auprc: f64,
    pub n_repetitive: usize,
    pub n_non_repetitive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSet {
    pub metrics: BTreeMap<Strategy, MetricReport>,
    pub repetitive: BTreeMap<Strategy, RepetitiveRow>,
    pub selection: Vec<SelectionRatio>,
    pub gain: Vec<GainRow>,
}

impl ReportSet {
    pub fn build(
        records: &[PredictionRecord],
        traces: &[SwitchTrace],
        sequences: &[EventSequence],
        vocab: &EventVocabulary,
    ) -> Result<Self> {
        let metrics = evaluate_strategies(records, vocab)?;
        let mut repetitive = BTreeMap::new();
        for &s in metrics.keys() {
            let mine: Vec<PredictionRecord> = records.iter().filter(|r| r.strategy == s).cloned().collect();
            let split = split_repetitive(&mine, sequences)?;
            repetitive.insert(
                s,
                RepetitiveRow {
                    repetitive_auprc: split.repetitive_auprc(),
                    non_repetitive_auprc: split.non_repetitive_auprc(),
                    n_repetitive: split.repetitive.len(),
                    n_non_repetitive: split.non_repetitive.len(),
                },
            );
        }
        let gain = match (metrics.get(&Strategy::GruPop), metrics.get(&Strategy::MetaSwitchEvent)) {
            (Some(a), Some(b)) => performance_gain_table(a, b, &occurrence_rates(sequences, vocab.n_targets())),
            _ => Vec::new(),
        };
        Ok(Self { metrics, repetitive, selection: selection_ratio(traces), gain })
    }

    pub fn overall(&self, s: Strategy) -> Option<f64> {
        self.metrics.get(&s).map(|m| m.overall_micro)
    }

    pub fn summary_json(&self) -> Value {
        let num = |x: f64| if x.is_finite() { json!(x) } else { Value::Null };
        let mut out = BTreeMap::new();
        for (s, m) in &self.metrics {
            let mut row = BTreeMap::new();
            row.insert("auprc_micro", num(m.overall_micro));
            row.insert("auprc_macro", num(m.overall_macro));
            row.insert("n_instances", json!(m.n_instances));
            if let Some(r) = self.repetitive.get(s) {
                row.insert("repetitive_auprc", num(r.repetitive_auprc));
                row.insert("non_repetitive_auprc", num(r.non_repetitive_auprc));
            }
            out.insert(s.as_str().to_string(), json!(row));
        }
        json!(out)
    }
}

fn f(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6}")
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(file_err(&path))
}

pub fn write_reports(dir: &Path, set: &ReportSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let mut table1 = String::from("strategy,auprc_micro,auprc_macro,n_instances\n");
    let mut per_step = String::from("strategy,step,n_patients,auprc\n");
    let mut per_event = String::from("strategy,event_index,event,category,n_positive,auprc\n");
    let mut per_category = String::from("strategy,category,n_events,auprc_macro,auprc_micro\n");
    let mut excluded = String::from("strategy,event_index,event\n");
    for (s, m) in &set.metrics {
        writeln!(table1, "{s},{},{},{}", f(m.overall_micro), f(m.overall_macro), m.n_instances).unwrap();
        for p in &m.per_step {
            writeln!(per_step, "{s},{},{},{}", p.step, p.n_patients, f(p.auprc)).unwrap();
        }
        for e in &m.per_event {
            writeln!(per_event, "{s},{},{},{},{},{}", e.index, e.name, e.category, e.n_positive, f(e.auprc)).unwrap();
            if e.n_positive == 0 {
                writeln!(excluded, "{s},{},{}", e.index, e.name).unwrap();
            }
        }
        for c in &m.per_category {
            writeln!(per_category, "{s},{},{},{},{}", c.category, c.n_events, f(c.macro_auprc), f(c.micro_auprc)).unwrap();
        }
    }
    let mut repetitive = String::from("strategy,repetitive_auprc,non_repetitive_auprc,n_repetitive,n_non_repetitive\n");
    for (s, r) in &set.repetitive {
        writeln!(
            repetitive,
            "{s},{},{},{},{}",
            f(r.repetitive_auprc),
            f(r.non_repetitive_auprc),
            r.n_repetitive,
            r.n_non_repetitive
        )
        .unwrap();
    }
    let mut selection = String::from("step,n_patients");
    for l in ModelLabel::ALL {
        write!(selection, ",{l}").unwrap();
    }
    selection.push('\n');
    for r in &set.selection {
        write!(selection, "{},{}", r.step, r.n_patients).unwrap();
        for x in r.fractions {
            write!(selection, ",{}", f(x)).unwrap();
        }
        selection.push('\n');
    }
    let mut gain = String::from("event_index,event,auprc_a,auprc_b,gain_pct,occurrence\n");
    for g in &set.gain {
        let pct = g.gain.map_or_else(|| "nan".to_string(), f);
        writeln!(gain, "{},{},{},{},{pct},{}", g.index, g.name, f(g.auprc_a), f(g.auprc_b), f(g.occurrence)).unwrap();
    }
    write(dir, "table1.csv", &table1)?;
    write(dir, "per_step.csv", &per_step)?;
    write(dir, "per_event.csv", &per_event)?;
    write(dir, "per_category.csv", &per_category)?;
    write(dir, "excluded_events.csv", &excluded)?;
    write(dir, "repetitive.csv", &repetitive)?;
    write(dir, "selection_ratio.csv", &selection)?;
    write(dir, "gain.csv", &gain)?;
    let json = serde_json::to_string_pretty(&set.summary_json()).expect("summary serializes");
    write(dir, "summary.json", &(json + "\n"))
}
