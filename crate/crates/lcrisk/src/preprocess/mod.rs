//! Raw diagnosis-event files to fixed-length encoded sequences.
//!
//! The pipeline per patient: group and date-sort events (same-day duplicates
//! of one code collapse to a single record), roll every code up one hierarchy
//! level, keep only the earliest COVID event (its date becomes the index
//! date), drop events more than the window length past the index date, strip
//! configured label-leak codes, then map to vocabulary ids and pad (or
//! truncate, keeping the most recent events) to exactly `K` positions.
//!
//! Patients without any COVID-set event cannot anchor an index date and are
//! excluded, with the reason reported to the caller.

mod cohort;
mod embeddings;

pub use cohort::EncodedCohort;
pub use embeddings::{load_embeddings, EmbeddingTable, Vocabulary, PAD_ID, UNK_ID};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Malformed { path: String, line: u64, msg: String },
    #[error("patient '{0}' has events but no label")]
    MissingLabel(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("patient '{0}' has no COVID-set event")]
    NoCovidEvent(String),
    #[error("record for '{0}' is missing its COVID index date")]
    NoIndexDate(String),
}

/// One diagnosis code recorded for a patient on a calendar day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisEvent {
    pub patient_id: String,
    pub date: NaiveDate,
    pub code: String,
}

/// A dated code within one patient's history.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Event {
    pub date: NaiveDate,
    pub code: String,
}

/// A labeled patient: date-ascending events (ties ordered by code string) and
/// a binary outcome. `covid_index_date` is set by [`collapse_covid`].
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<Event>,
    pub label: u8,
    pub covid_index_date: Option<NaiveDate>,
}

/// One-level child-to-parent code map.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    parent: BTreeMap<String, String>,
}

impl Hierarchy {
    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let display = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|source| PreprocessError::Csv {
            path: display.clone(),
            source,
        })?;
        check_headers(&mut rdr, &["child", "parent"], &display)?;
        let mut parent = BTreeMap::new();
        for result in rdr.records() {
            let record = result.map_err(|source| PreprocessError::Csv {
                path: display.clone(),
                source,
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let child = record.get(0).unwrap_or("").trim().to_string();
            let par = record.get(1).unwrap_or("").trim().to_string();
            if child.is_empty() || par.is_empty() {
                return Err(PreprocessError::Malformed {
                    path: display,
                    line,
                    msg: "empty child or parent code".into(),
                });
            }
            if child == par {
                return Err(PreprocessError::Malformed {
                    path: display,
                    line,
                    msg: format!("self-loop for code '{child}'"),
                });
            }
            if parent.insert(child.clone(), par).is_some() {
                return Err(PreprocessError::Malformed {
                    path: display,
                    line,
                    msg: format!("duplicate child code '{child}'"),
                });
            }
        }
        Ok(Hierarchy { parent })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Hierarchy { parent: pairs.into_iter().collect() }
    }

    pub fn parent_of(&self, code: &str) -> Option<&str> {
        self.parent.get(code).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

/// Fixed-length token encoding of one patient. `token_ids` always has length
/// `K`; `dates` covers only the real (non-PAD) prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub patient_id: String,
    pub token_ids: Vec<u32>,
    pub dates: Vec<NaiveDate>,
    pub label: u8,
    pub covid_index_date: NaiveDate,
}

impl EncodedPatient {
    pub fn n_real(&self) -> usize {
        self.dates.len()
    }
}

/// A patient dropped by the pipeline, with the reason.
#[derive(Debug, Clone)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: String,
}

fn check_headers(
    rdr: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
    path: &str,
) -> Result<(), PreprocessError> {
    let headers = rdr.headers().map_err(|source| PreprocessError::Csv {
        path: path.to_string(),
        source,
    })?;
    let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    if got != expected {
        return Err(PreprocessError::Malformed {
            path: path.to_string(),
            line: 1,
            msg: format!("expected header {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

/// Parse the events CSV (`patient_id,date,code`, ISO-8601 dates).
pub fn read_events(path: &Path) -> Result<Vec<DiagnosisEvent>, PreprocessError> {
    let display = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| PreprocessError::Csv {
        path: display.clone(),
        source,
    })?;
    check_headers(&mut rdr, &["patient_id", "date", "code"], &display)?;
    let mut events = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|source| PreprocessError::Csv {
            path: display.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(PreprocessError::Malformed {
                path: display,
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let patient_id = record.get(0).unwrap().trim().to_string();
        let date_str = record.get(1).unwrap().trim();
        let code = record.get(2).unwrap().trim().to_string();
        if patient_id.is_empty() || code.is_empty() {
            return Err(PreprocessError::Malformed {
                path: display,
                line,
                msg: "empty patient_id or code".into(),
            });
        }
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|e| {
            PreprocessError::Malformed {
                path: display.clone(),
                line,
                msg: format!("bad date '{date_str}': {e}"),
            }
        })?;
        events.push(DiagnosisEvent { patient_id, date, code });
    }
    Ok(events)
}

/// Parse the labels CSV (`patient_id,label`, label in {0,1}).
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>, PreprocessError> {
    let display = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|source| PreprocessError::Csv {
        path: display.clone(),
        source,
    })?;
    check_headers(&mut rdr, &["patient_id", "label"], &display)?;
    let mut labels = BTreeMap::new();
    for result in rdr.records() {
        let record = result.map_err(|source| PreprocessError::Csv {
            path: display.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let patient_id = record.get(0).unwrap_or("").trim().to_string();
        let label = match record.get(1).map(str::trim) {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => {
                return Err(PreprocessError::Malformed {
                    path: display,
                    line,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        if patient_id.is_empty() {
            return Err(PreprocessError::Malformed {
                path: display,
                line,
                msg: "empty patient_id".into(),
            });
        }
        if labels.insert(patient_id.clone(), label).is_some() {
            return Err(PreprocessError::Malformed {
                path: display,
                line,
                msg: format!("duplicate label row for '{patient_id}'"),
            });
        }
    }
    Ok(labels)
}

/// Sort events date-ascending (code string breaks same-day ties) and collapse
/// repeated (code, date) pairs to a single record.
pub fn sort_and_dedup(events: &mut Vec<Event>) {
    events.sort_by(|a, b| (a.date, &a.code).cmp(&(b.date, &b.code)));
    events.dedup_by(|a, b| a.date == b.date && a.code == b.code);
}

/// Read events and labels and assemble one record per labeled patient,
/// ordered by patient id. Labeled patients without events are retained with
/// empty histories; events for unlabeled patients are an error.
pub fn ingest_events(
    events_path: &Path,
    labels_path: &Path,
) -> Result<Vec<PatientRecord>, PreprocessError> {
    let events = read_events(events_path)?;
    let labels = read_labels(labels_path)?;
    let mut by_patient: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for ev in events {
        if !labels.contains_key(&ev.patient_id) {
            return Err(PreprocessError::MissingLabel(ev.patient_id));
        }
        by_patient
            .entry(ev.patient_id)
            .or_default()
            .push(Event { date: ev.date, code: ev.code });
    }
    let mut records = Vec::with_capacity(labels.len());
    for (patient_id, label) in labels {
        let mut events = by_patient.remove(&patient_id).unwrap_or_default();
        sort_and_dedup(&mut events);
        records.push(PatientRecord { patient_id, events, label, covid_index_date: None });
    }
    Ok(records)
}

/// Replace every code by its one-level parent where one exists; codes without
/// a parent pass through. Duplicates created by the roll-up on the same day
/// are re-collapsed.
pub fn rollup(mut record: PatientRecord, hierarchy: &Hierarchy) -> PatientRecord {
    for event in &mut record.events {
        if let Some(parent) = hierarchy.parent_of(&event.code) {
            event.code = parent.to_string();
        }
    }
    sort_and_dedup(&mut record.events);
    record
}

/// Keep only the earliest COVID-set event and stamp its date as the COVID
/// index date. A record without any COVID-set event is an error (the pipeline
/// turns it into an exclusion).
pub fn collapse_covid(
    mut record: PatientRecord,
    covid_codes: &HashSet<String>,
) -> Result<PatientRecord, PreprocessError> {
    let first = record
        .events
        .iter()
        .position(|e| covid_codes.contains(&e.code))
        .ok_or_else(|| PreprocessError::NoCovidEvent(record.patient_id.clone()))?;
    let index_date = record.events[first].date;
    let mut seen = false;
    record.events.retain(|e| {
        if !covid_codes.contains(&e.code) {
            return true;
        }
        if seen {
            false
        } else {
            seen = true;
            true
        }
    });
    record.covid_index_date = Some(index_date);
    Ok(record)
}

/// Drop events more than `days` past the COVID index date; all prior history
/// is retained. The boundary day itself is kept.
pub fn window(mut record: PatientRecord, days: i64) -> Result<PatientRecord, PreprocessError> {
    let index = record
        .covid_index_date
        .ok_or_else(|| PreprocessError::NoIndexDate(record.patient_id.clone()))?;
    let cutoff = index + chrono::Duration::days(days);
    record.events.retain(|e| e.date <= cutoff);
    Ok(record)
}

/// Map a collapsed, windowed record to vocabulary ids, keeping the most
/// recent `k` events when the history is longer, padding the tail otherwise.
/// Label-leak codes are stripped before truncation. Codes without an
/// embedding map to the UNK id.
pub fn encode(
    record: &PatientRecord,
    vocab: &Vocabulary,
    k: usize,
    leak_codes: &HashSet<String>,
) -> Result<EncodedPatient, PreprocessError> {
    let index_date = record
        .covid_index_date
        .ok_or_else(|| PreprocessError::NoIndexDate(record.patient_id.clone()))?;
    let kept: Vec<&Event> = record
        .events
        .iter()
        .filter(|e| !leak_codes.contains(&e.code))
        .collect();
    let start = kept.len().saturating_sub(k);
    let tail = &kept[start..];
    let mut token_ids: Vec<u32> = tail
        .iter()
        .map(|e| vocab.id_of(&e.code).unwrap_or(UNK_ID))
        .collect();
    let dates: Vec<NaiveDate> = tail.iter().map(|e| e.date).collect();
    token_ids.resize(k, PAD_ID);
    Ok(EncodedPatient {
        patient_id: record.patient_id.clone(),
        token_ids,
        dates,
        label: record.label,
        covid_index_date: index_date,
    })
}

/// Settings for the record-to-cohort pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub window_days: i64,
    pub max_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { window_days: 45, max_len: 1000 }
    }
}

/// Run dedup → rollup → collapse → window → encode over every record.
/// Patients without a COVID-set event are excluded and reported.
#[allow(clippy::too_many_arguments)]
pub fn encode_cohort(
    records: Vec<PatientRecord>,
    hierarchy: &Hierarchy,
    covid_codes: &HashSet<String>,
    leak_codes: &HashSet<String>,
    config: &PipelineConfig,
    vocab: Vocabulary,
    embedding: EmbeddingTable,
) -> Result<(EncodedCohort, Vec<Exclusion>), PreprocessError> {
    let mut patients = Vec::with_capacity(records.len());
    let mut exclusions = Vec::new();
    for record in records {
        let record = rollup(record, hierarchy);
        let record = match collapse_covid(record, covid_codes) {
            Ok(r) => r,
            Err(PreprocessError::NoCovidEvent(id)) => {
                exclusions.push(Exclusion {
                    patient_id: id,
                    reason: "no COVID-set event; cannot anchor an index date".into(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let record = window(record, config.window_days)?;
        patients.push(encode(&record, &vocab, config.max_len, leak_codes)?);
    }
    Ok((
        EncodedCohort { max_len: config.max_len, vocab, embedding, patients },
        exclusions,
    ))
}

/// Read a newline-separated code list; blank lines and `#` comments skipped.
pub fn read_code_set(path: &Path) -> Result<HashSet<String>, PreprocessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}
