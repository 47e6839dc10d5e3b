//! Versioned binary container for an encoded cohort.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic           4 bytes  "LCCO"
//! version         u32      currently 1
//! K               u32      tokens per patient
//! dim             u32      embedding width
//! code count      u32      M = vocabulary entries beyond PAD/UNK
//! codes           M × { u16 length, UTF-8 bytes }   (ids 2..M+2 in order)
//! embeddings      (M+2) × dim × f64                  (rows 0 and 1 included)
//! patient count   u32
//! per patient:
//!   id            u16 length, UTF-8 bytes
//!   label         u8
//!   index date    i32 days since 1970-01-01
//!   n_real        u32
//!   token ids     K × u32
//!   event dates   n_real × i32 days since 1970-01-01
//! ```
//!
//! The embedding matrix rides along so downstream stages (training,
//! evaluation, attribution) need no separate embedding input. Raw float bits
//! are preserved; write → read → write round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::embeddings::{EmbeddingTable, Vocabulary};
use super::{EncodedPatient, PreprocessError};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"LCCO";
const VERSION: u32 = 1;

/// All encoded patients plus the vocabulary and embedding table they were
/// encoded against.
#[derive(Debug, Clone)]
pub struct EncodedCohort {
    pub max_len: usize,
    pub vocab: Vocabulary,
    pub embedding: EmbeddingTable,
    pub patients: Vec<EncodedPatient>,
}

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch date")
}

pub(crate) fn date_to_days(date: NaiveDate) -> i32 {
    (date - epoch()).num_days() as i32
}

pub(crate) fn days_to_date(days: i32) -> NaiveDate {
    epoch() + chrono::Duration::days(days as i64)
}

impl EncodedCohort {
    pub fn labels(&self) -> Vec<u8> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.max_len as u32).to_le_bytes())?;
        w.write_all(&(self.embedding.dim() as u32).to_le_bytes())?;
        let codes = self.vocab.codes();
        w.write_all(&(codes.len() as u32).to_le_bytes())?;
        for code in codes {
            write_str(&mut w, code)?;
        }
        for v in self.embedding.weights().data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.patients.len() as u32).to_le_bytes())?;
        for p in &self.patients {
            write_str(&mut w, &p.patient_id)?;
            w.write_all(&[p.label])?;
            w.write_all(&date_to_days(p.covid_index_date).to_le_bytes())?;
            w.write_all(&(p.n_real() as u32).to_le_bytes())?;
            debug_assert_eq!(p.token_ids.len(), self.max_len);
            for id in &p.token_ids {
                w.write_all(&id.to_le_bytes())?;
            }
            for date in &p.dates {
                w.write_all(&date_to_days(*date).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PreprocessError::Format(format!(
                "{}: not a cohort file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(PreprocessError::Format(format!("unsupported cohort version {version}")));
        }
        let max_len = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let code_count = read_u32(&mut r)? as usize;
        let mut codes = Vec::with_capacity(code_count);
        for _ in 0..code_count {
            codes.push(read_str(&mut r)?);
        }
        let vocab = Vocabulary::from_codes(codes)?;
        let rows = code_count + 2;
        let mut weights = vec![0.0f64; rows * dim];
        let mut buf8 = [0u8; 8];
        for v in weights.iter_mut() {
            r.read_exact(&mut buf8)?;
            *v = f64::from_le_bytes(buf8);
        }
        let weights = Tensor::from_vec(&[rows, dim], weights)
            .map_err(|e| PreprocessError::Format(e.to_string()))?;
        let embedding = EmbeddingTable::new(dim, weights);

        let patient_count = read_u32(&mut r)? as usize;
        let mut patients = Vec::with_capacity(patient_count);
        for _ in 0..patient_count {
            let patient_id = read_str(&mut r)?;
            let mut label = [0u8; 1];
            r.read_exact(&mut label)?;
            if label[0] > 1 {
                return Err(PreprocessError::Format(format!(
                    "patient '{patient_id}': label {} out of range",
                    label[0]
                )));
            }
            let index_days = read_i32(&mut r)?;
            let n_real = read_u32(&mut r)? as usize;
            if n_real > max_len {
                return Err(PreprocessError::Format(format!(
                    "patient '{patient_id}': {n_real} real tokens exceeds K={max_len}"
                )));
            }
            let mut token_ids = vec![0u32; max_len];
            for id in token_ids.iter_mut() {
                *id = read_u32(&mut r)?;
                if *id as usize >= rows {
                    return Err(PreprocessError::Format(format!(
                        "patient '{patient_id}': token id {id} outside vocabulary"
                    )));
                }
            }
            let mut dates = Vec::with_capacity(n_real);
            for _ in 0..n_real {
                dates.push(days_to_date(read_i32(&mut r)?));
            }
            patients.push(EncodedPatient {
                patient_id,
                token_ids,
                dates,
                label: label[0],
                covid_index_date: days_to_date(index_days),
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(PreprocessError::Format("trailing bytes after cohort".into()));
        }
        Ok(EncodedCohort { max_len, vocab, embedding, patients })
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_str(r: &mut impl Read) -> Result<String, PreprocessError> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| PreprocessError::Format("non-UTF-8 string".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, PreprocessError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_i32(r: &mut impl Read) -> Result<i32, PreprocessError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(i32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{PAD_ID, UNK_ID};

    fn sample_cohort() -> EncodedCohort {
        let vocab = Vocabulary::from_codes(vec!["covid".into(), "flu".into()]).unwrap();
        let weights = Tensor::from_vec(
            &[4, 3],
            vec![
                0.0, 0.0, 0.0, // PAD
                0.5, 0.5, 0.5, // UNK
                1.0, -2.0, 3.5, // covid
                0.25, 0.0, -1.0, // flu
            ],
        )
        .unwrap();
        let embedding = EmbeddingTable::new(3, weights);
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        let patients = vec![
            EncodedPatient {
                patient_id: "p1".into(),
                token_ids: vec![2, 3, UNK_ID, PAD_ID, PAD_ID],
                dates: vec![d("2021-01-01"), d("2021-01-05"), d("2021-02-01")],
                label: 1,
                covid_index_date: d("2021-01-01"),
            },
            EncodedPatient {
                patient_id: "p2".into(),
                token_ids: vec![2, PAD_ID, PAD_ID, PAD_ID, PAD_ID],
                dates: vec![d("1969-12-25")],
                label: 0,
                covid_index_date: d("1969-12-25"),
            },
        ];
        EncodedCohort { max_len: 5, vocab, embedding, patients }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cohort = sample_cohort();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.bin");
        cohort.save(&path).unwrap();
        let loaded = EncodedCohort::load(&path).unwrap();
        assert_eq!(loaded.max_len, cohort.max_len);
        assert_eq!(loaded.vocab, cohort.vocab);
        assert_eq!(loaded.patients, cohort.patients);
        let bits_a: Vec<u64> =
            cohort.embedding.weights().data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> =
            loaded.embedding.weights().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);

        let path2 = dir.path().join("cohort2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pre_epoch_dates_survive() {
        let d = NaiveDate::parse_from_str("1969-12-25", "%Y-%m-%d").unwrap();
        assert_eq!(days_to_date(date_to_days(d)), d);
        assert!(date_to_days(d) < 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"XXXX123").unwrap();
        assert!(EncodedCohort::load(&path).is_err());
    }
}
