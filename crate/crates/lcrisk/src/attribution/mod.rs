//! GradCAM attribution of predictions to individual diagnoses.
//!
//! For a CNN-variant model in eval mode, the positive-class logit is
//! differentiated back to the raw convolution map (captured before pooling,
//! so it is still token-aligned). Gradients are pooled per channel, the map
//! is weighted by the pooled gradients and averaged over channels, rectified,
//! and max-scaled to [0, 1]. Scores cover exactly the non-PAD prefix of the
//! input; the highest-scoring diagnosis and its signed day offset from the
//! COVID index date feed the cohort-level summaries.

mod heatmap;
mod summary;

pub use heatmap::emit_heatmap;
pub use summary::{
    histogram, sanitize_code, summarize, write_histogram_csv, write_summary_csv, CodeSummary,
    CohortSummary,
};

use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Mode, Model, ModelError};
use crate::preprocess::{EncodedCohort, EncodedPatient, Vocabulary};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("attribution misuse: {0}")]
    Usage(String),
    #[error("patient '{0}' has no real tokens")]
    AllPad(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("attribution record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-patient attribution: scores over the real tokens, the top diagnosis,
/// and its time separation from the COVID index date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub patient_id: String,
    pub top_code: String,
    pub top_score: f64,
    pub time_separation_days: i64,
    pub scores: Vec<f64>,
}

/// GradCAM scores over the real (non-PAD) tokens of one patient, in [0, 1].
/// The model must be the CNN variant, in eval mode.
pub fn gradcam(model: &Model, patient: &EncodedPatient) -> Result<Vec<f64>, AttributionError> {
    if model.mode() != Mode::Eval {
        return Err(AttributionError::Usage(
            "gradcam requires eval mode (running batch-norm statistics)".into(),
        ));
    }
    let n_real = patient.n_real();
    if n_real == 0 {
        return Err(AttributionError::AllPad(patient.patient_id.clone()));
    }
    let (activation, gradient) = model.conv_activation_and_grad(&patient.token_ids)?;
    let (channels, len) = activation.dims2().map_err(ModelError::from)?;

    // channel weights: gradient pooled over all positions
    let mut weights = vec![0.0; channels];
    for (c, w) in weights.iter_mut().enumerate() {
        *w = gradient.data()[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64;
    }

    // weighted map over the real prefix, averaged across channels, rectified
    let mut map = vec![0.0; n_real];
    for (pos, m) in map.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, w) in weights.iter().enumerate() {
            acc += w * activation.data()[c * len + pos];
        }
        *m = (acc / channels as f64).max(0.0);
    }

    let max = map.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for m in &mut map {
            *m /= max;
        }
    }
    Ok(map)
}

/// Highest-scoring real token (earliest position on ties): its post-rollup
/// code and event date.
pub fn top_code(
    scores: &[f64],
    patient: &EncodedPatient,
    vocab: &Vocabulary,
) -> Result<(String, NaiveDate), AttributionError> {
    if scores.is_empty() || patient.n_real() == 0 {
        return Err(AttributionError::AllPad(patient.patient_id.clone()));
    }
    debug_assert_eq!(scores.len(), patient.n_real());
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let id = patient.token_ids[best];
    let code = vocab
        .code_of(id)
        .ok_or_else(|| AttributionError::Usage(format!("token id {id} outside vocabulary")))?
        .to_string();
    Ok((code, patient.dates[best]))
}

/// Signed whole days from the COVID index date to an event date: negative
/// before the index date, positive after.
pub fn time_separation(event_date: NaiveDate, index_date: NaiveDate) -> i64 {
    (event_date - index_date).num_days()
}

/// Full attribution for one patient.
pub fn attribute_patient(
    model: &Model,
    patient: &EncodedPatient,
    vocab: &Vocabulary,
) -> Result<AttributionResult, AttributionError> {
    let scores = gradcam(model, patient)?;
    let (code, date) = top_code(&scores, patient, vocab)?;
    let separation = time_separation(date, patient.covid_index_date);
    let top_score = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(AttributionResult {
        patient_id: patient.patient_id.clone(),
        top_code: code,
        top_score,
        time_separation_days: separation,
        scores,
    })
}

/// Attribute every correctly predicted positive: label 1 and score at or
/// above the threshold. `scores` must align with `cohort.patients`. All-PAD
/// patients are skipped.
pub fn attribute_correct_positives(
    model: &Model,
    cohort: &EncodedCohort,
    scores: &[f64],
    threshold: f64,
) -> Result<Vec<AttributionResult>, AttributionError> {
    if scores.len() != cohort.patients.len() {
        return Err(AttributionError::Usage(format!(
            "{} scores for {} patients",
            scores.len(),
            cohort.patients.len()
        )));
    }
    let mut results = Vec::new();
    for (patient, score) in cohort.patients.iter().zip(scores) {
        if patient.label != 1 || *score < threshold || patient.n_real() == 0 {
            continue;
        }
        results.push(attribute_patient(model, patient, &cohort.vocab)?);
    }
    Ok(results)
}

/// JSON-lines dump, one object per patient.
pub fn write_attributions_jsonl(
    results: &[AttributionResult],
    path: &Path,
) -> Result<(), AttributionError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attributions_jsonl(path: &Path) -> Result<Vec<AttributionResult>, AttributionError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::{Architecture, ModelSpec};
    use crate::preprocess::{EmbeddingTable, PAD_ID};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn cnn_spec() -> ModelSpec {
        ModelSpec {
            arch: Architecture::BiLstmCnn,
            embed_dim: 6,
            hidden: 3,
            layers: 2,
            conv_channels: 4,
            kernel: 3,
            pool: 2,
            attn_width: 3,
            classes: 2,
            max_len: 10,
            seed: 31,
        }
    }

    fn embedding(vocab: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in data.iter_mut().take(dim) {
            *v = 0.0;
        }
        Tensor::from_vec(&[vocab, dim], data).unwrap()
    }

    fn patient(n_real: usize, k: usize) -> EncodedPatient {
        let mut token_ids: Vec<u32> = (0..n_real as u32).map(|i| 2 + (i % 5)).collect();
        token_ids.resize(k, PAD_ID);
        let dates: Vec<NaiveDate> =
            (0..n_real).map(|i| d("2021-01-01") + chrono::Duration::days(i as i64)).collect();
        EncodedPatient {
            patient_id: "p1".into(),
            token_ids,
            dates,
            label: 1,
            covid_index_date: d("2021-01-03"),
        }
    }

    #[test]
    fn scores_are_unit_scaled_over_real_tokens() {
        let model = Model::new(cnn_spec(), embedding(8, 6, 1)).unwrap();
        let p = patient(6, 10);
        let scores = gradcam(&model, &p).unwrap();
        assert_eq!(scores.len(), 6);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let max = scores.iter().cloned().fold(0.0f64, f64::max);
        assert!(max == 1.0 || max == 0.0, "max scaling yields 0 or 1, got {max}");
    }

    #[test]
    fn zeroed_conv_unit_gives_all_zero_scores() {
        let mut model = Model::new(cnn_spec(), embedding(8, 6, 2)).unwrap();
        for name in ["conv.kernels", "conv.bias"] {
            let t = model.param_by_name_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec().as_slice());
        }
        let p = patient(6, 10);
        let scores = gradcam(&model, &p).unwrap();
        assert!(scores.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let spec = ModelSpec { arch: Architecture::BiLstm, ..cnn_spec() };
        let model = Model::new(spec, embedding(8, 6, 3)).unwrap();
        let p = patient(6, 10);
        assert!(matches!(
            gradcam(&model, &p),
            Err(AttributionError::Model(ModelError::WrongArchitecture { .. }))
        ));
    }

    #[test]
    fn train_mode_is_rejected() {
        let mut model = Model::new(cnn_spec(), embedding(8, 6, 4)).unwrap();
        model.set_mode(Mode::Train);
        let p = patient(6, 10);
        assert!(matches!(gradcam(&model, &p), Err(AttributionError::Usage(_))));
    }

    #[test]
    fn gradcam_is_read_only_and_deterministic() {
        let model = Model::new(cnn_spec(), embedding(8, 6, 5)).unwrap();
        let before: Vec<Vec<u64>> = model
            .named_parameters()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let p = patient(8, 10);
        let s1 = gradcam(&model, &p).unwrap();
        let s2 = gradcam(&model, &p).unwrap();
        assert_eq!(s1, s2);
        let after: Vec<Vec<u64>> = model
            .named_parameters()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn top_code_takes_earliest_on_ties() {
        let vocab = Vocabulary::from_codes(vec!["a".into(), "b".into(), "c".into(), "e".into(), "f".into()]).unwrap();
        let p = patient(4, 10);
        let scores = vec![0.5, 1.0, 1.0, 0.2];
        let (code, date) = top_code(&scores, &p, &vocab).unwrap();
        assert_eq!(date, p.dates[1], "earlier of the two tied positions");
        assert_eq!(code, vocab.code_of(p.token_ids[1]).unwrap());
    }

    #[test]
    fn time_separation_signs() {
        let index = d("2021-02-10");
        assert_eq!(time_separation(index, index), 0);
        assert_eq!(time_separation(d("2021-01-31"), index), -10);
        assert_eq!(time_separation(d("2021-03-27"), index), 45);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attr.jsonl");
        let results = vec![AttributionResult {
            patient_id: "p1".into(),
            top_code: "risk-001".into(),
            top_score: 1.0,
            time_separation_days: -12,
            scores: vec![0.25, 1.0, 0.0],
        }];
        write_attributions_jsonl(&results, &path).unwrap();
        let loaded = read_attributions_jsonl(&path).unwrap();
        assert_eq!(loaded, results);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"patient_id":"p1","top_code":"risk-001""#));
    }
}
