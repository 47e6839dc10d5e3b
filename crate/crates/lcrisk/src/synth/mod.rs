//! Synthetic cohorts with a planted, analytically characterized risk signal.
//!
//! Every patient gets a random background history, exactly one COVID event
//! (the index date), and — depending on label and signal strength — planted
//! risk-code events. Because the only label-dependent feature is discrete
//! (the risk-event count in presence mode, the risk/trigger order in temporal
//! mode), the Bayes-optimal AUC of the generator is an exact finite sum over
//! that feature's joint distribution; it is written to the manifest and
//! upper-bounds any model trained on the cohort.
//!
//! In presence mode a positive patient carries risk events with probability
//! `p_signal`, and then one to three of them; a negative carries risk events
//! with probability `1 − p_signal`, and then exactly one. The count asymmetry
//! lifts the Bayes AUC above plain presence detection (which would cap it at
//! exactly `p_signal`), leaving trained models measurable headroom.
//!
//! Events are emitted under child codes (`raw:X`) with a one-level hierarchy
//! mapping them to the parent codes that carry embeddings, so the roll-up
//! stage is exercised end to end and encoding produces no unknown tokens.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialize manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    /// Label correlates with the presence (and count) of risk codes.
    Presence,
    /// Everyone carries the risk and trigger codes; label correlates with
    /// whether the risk code precedes the trigger.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Total distinct parent codes, including COVID, risk, and (in temporal
    /// mode) trigger codes.
    pub vocab_size: usize,
    pub n_risk_codes: usize,
    /// Signal strength in (0.5, 1].
    pub p_signal: f64,
    /// Fraction of positive labels; 1/6 mirrors a 5:1 control:case ratio.
    pub case_fraction: f64,
    /// Background history length, uniform in `[min_events, max_events]`.
    pub min_events: usize,
    pub max_events: usize,
    /// Background events fall uniformly in `[-pre_index_span_days, +45]`
    /// relative to the index date.
    pub pre_index_span_days: i64,
    /// Risk events fall uniformly this many days before the index date.
    pub risk_days_before_index: (i64, i64),
    pub embed_dim: usize,
    pub seed: u64,
    pub mode: SignalMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 6000,
            vocab_size: 300,
            n_risk_codes: 5,
            p_signal: 0.9,
            case_fraction: 1.0 / 6.0,
            min_events: 30,
            max_events: 80,
            pre_index_span_days: 365,
            risk_days_before_index: (1, 30),
            embed_dim: 200,
            seed: 42,
            mode: SignalMode::Presence,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients == 0 {
            return Err(SynthError::Config("n_patients must be positive".into()));
        }
        if !(self.p_signal > 0.5 && self.p_signal <= 1.0) {
            return Err(SynthError::Config("p_signal must be in (0.5, 1]".into()));
        }
        if !(self.case_fraction > 0.0 && self.case_fraction < 1.0) {
            return Err(SynthError::Config("case_fraction must be in (0, 1)".into()));
        }
        let special = 1 + self.n_risk_codes + usize::from(self.mode == SignalMode::Temporal);
        if self.n_risk_codes == 0 || self.vocab_size <= special {
            return Err(SynthError::Config(format!(
                "vocab_size {} must exceed covid + risk + trigger codes ({special})",
                self.vocab_size
            )));
        }
        if self.min_events > self.max_events {
            return Err(SynthError::Config("min_events must not exceed max_events".into()));
        }
        let (lo, hi) = self.risk_days_before_index;
        if lo < 1 || hi < lo {
            return Err(SynthError::Config("risk day range must satisfy 1 <= lo <= hi".into()));
        }
        if self.pre_index_span_days < hi {
            return Err(SynthError::Config(
                "pre_index_span_days must cover the risk placement range".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(SynthError::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let config: SynthConfig =
            serde_json::from_str(text).map_err(|e| SynthError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Ground truth for one generated patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub label: u8,
    /// Planted risk codes (parent form), one entry per risk event.
    pub planted: Vec<String>,
    /// Day offsets of the planted events relative to the index date.
    pub planted_offsets: Vec<i64>,
}

/// Generator ground truth: configuration, the risk-code set, the closed-form
/// Bayes AUC, and per-patient planted codes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub risk_codes: Vec<String>,
    pub bayes_auc: f64,
    pub patients: Vec<PatientTruth>,
}

/// Paths of the emitted files.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub events: PathBuf,
    pub labels: PathBuf,
    pub hierarchy: PathBuf,
    pub embeddings: PathBuf,
    pub covid_codes: PathBuf,
    pub leak_codes: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

/// Bayes-optimal AUC for a discrete sufficient statistic: order classes by
/// likelihood ratio, count wins plus half-ties over the independent joint.
fn bayes_auc_discrete(pos_pmf: &[f64], neg_pmf: &[f64]) -> f64 {
    let lr = |k: usize| -> f64 {
        if neg_pmf[k] == 0.0 {
            if pos_pmf[k] == 0.0 {
                f64::NAN // zero-probability class, never drawn
            } else {
                f64::INFINITY
            }
        } else {
            pos_pmf[k] / neg_pmf[k]
        }
    };
    let mut auc = 0.0;
    for (cp, pp) in pos_pmf.iter().enumerate() {
        if *pp == 0.0 {
            continue;
        }
        for (cn, pn) in neg_pmf.iter().enumerate() {
            if *pn == 0.0 {
                continue;
            }
            let w = pp * pn;
            let (a, b) = (lr(cp), lr(cn));
            if a > b {
                auc += w;
            } else if a == b {
                auc += 0.5 * w;
            }
        }
    }
    auc
}

/// Closed-form Bayes AUC of the generator at the configured signal strength.
pub fn bayes_auc(config: &SynthConfig) -> f64 {
    let p = config.p_signal;
    match config.mode {
        SignalMode::Presence => {
            // positive: no risk events w.p. 1-p, else count uniform in {1,2,3};
            // negative: one risk event w.p. 1-p, else none
            let pos = [1.0 - p, p / 3.0, p / 3.0, p / 3.0];
            let neg = [p, 1.0 - p, 0.0, 0.0];
            bayes_auc_discrete(&pos, &neg)
        }
        SignalMode::Temporal => {
            // binary feature: risk precedes trigger
            let pos = [1.0 - p, p];
            let neg = [p, 1.0 - p];
            bayes_auc_discrete(&pos, &neg)
        }
    }
}

struct CodeBook {
    covid: String,
    risk: Vec<String>,
    trigger: Option<String>,
    background: Vec<String>,
}

fn code_book(config: &SynthConfig) -> CodeBook {
    let covid = "covid".to_string();
    let risk: Vec<String> = (0..config.n_risk_codes).map(|i| format!("risk-{i:03}")).collect();
    let trigger = (config.mode == SignalMode::Temporal).then(|| "trigger".to_string());
    let special = 1 + risk.len() + usize::from(trigger.is_some());
    let background: Vec<String> =
        (0..config.vocab_size - special).map(|i| format!("bg-{i:04}")).collect();
    CodeBook { covid, risk, trigger, background }
}

fn raw(code: &str) -> String {
    format!("raw:{code}")
}

fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Embedding geometry: all vectors unit-norm; risk (and trigger) vectors
/// share a coherent offset direction (cosine ~0.7) while background vectors
/// are independent random directions, so a frozen-embedding model can expose
/// the signal by direction alone.
fn embedding_vector(rng: &mut ChaCha8Rng, dim: usize, offset: Option<&[f64]>) -> Vec<f64> {
    let g = unit_normal(rng, dim);
    match offset {
        None => g,
        Some(w) => {
            let c: f64 = 0.7;
            let s = (1.0 - c * c).sqrt();
            let mut v: Vec<f64> = w.iter().zip(&g).map(|(wv, gv)| c * wv + s * gv).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            v
        }
    }
}

struct GeneratedEvent {
    patient_id: String,
    date: NaiveDate,
    code: String,
}

/// Generate a cohort into `out_dir`: `events.csv`, `labels.csv`,
/// `hierarchy.csv`, `embeddings.txt`, `covid_codes.txt`, `leak_codes.txt`,
/// and `manifest.json`. Identical seeds produce byte-identical files.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let book = code_book(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // embeddings first so the draw order is independent of patient count
    let offset = unit_normal(&mut rng, config.embed_dim);
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::with_capacity(config.vocab_size);
    vectors.push((book.covid.clone(), embedding_vector(&mut rng, config.embed_dim, None)));
    for code in &book.risk {
        vectors.push((code.clone(), embedding_vector(&mut rng, config.embed_dim, Some(&offset))));
    }
    if let Some(trigger) = &book.trigger {
        vectors.push((trigger.clone(), embedding_vector(&mut rng, config.embed_dim, Some(&offset))));
    }
    for code in &book.background {
        vectors.push((code.clone(), embedding_vector(&mut rng, config.embed_dim, None)));
    }

    let base_date = NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date");
    let mut events: Vec<GeneratedEvent> = Vec::new();
    let mut labels: Vec<(String, u8)> = Vec::with_capacity(config.n_patients);
    let mut truths: Vec<PatientTruth> = Vec::with_capacity(config.n_patients);
    let (risk_lo, risk_hi) = config.risk_days_before_index;

    for i in 0..config.n_patients {
        let patient_id = format!("p{i:06}");
        let label = u8::from(rng.random_bool(config.case_fraction));
        let index_date = base_date + chrono::Duration::days(rng.random_range(0..=180));

        events.push(GeneratedEvent {
            patient_id: patient_id.clone(),
            date: index_date,
            code: raw(&book.covid),
        });

        let n_bg = rng.random_range(config.min_events..=config.max_events);
        for _ in 0..n_bg {
            let code = &book.background[rng.random_range(0..book.background.len())];
            let day = rng.random_range(-config.pre_index_span_days..=45);
            events.push(GeneratedEvent {
                patient_id: patient_id.clone(),
                date: index_date + chrono::Duration::days(day),
                code: raw(code),
            });
        }

        let mut planted = Vec::new();
        let mut planted_offsets = Vec::new();
        match config.mode {
            SignalMode::Presence => {
                let carries = if label == 1 {
                    rng.random_bool(config.p_signal)
                } else {
                    rng.random_bool(1.0 - config.p_signal)
                };
                if carries {
                    let count = if label == 1 { rng.random_range(1..=3) } else { 1 };
                    let mut used: HashSet<(usize, i64)> = HashSet::new();
                    while used.len() < count {
                        let code_idx = rng.random_range(0..book.risk.len());
                        let day = -rng.random_range(risk_lo..=risk_hi);
                        if !used.insert((code_idx, day)) {
                            continue;
                        }
                        let code = &book.risk[code_idx];
                        events.push(GeneratedEvent {
                            patient_id: patient_id.clone(),
                            date: index_date + chrono::Duration::days(day),
                            code: raw(code),
                        });
                        planted.push(code.clone());
                        planted_offsets.push(day);
                    }
                }
            }
            SignalMode::Temporal => {
                // two distinct pre-index days; orientation carries the label
                let span = (risk_hi - risk_lo).max(1);
                let d1 = rng.random_range(risk_lo..=risk_hi);
                let mut d2 = rng.random_range(risk_lo..=risk_hi);
                while d2 == d1 {
                    d2 = risk_lo + (d2 - risk_lo + 1) % (span + 1);
                }
                let (early, late) = (d1.max(d2), d1.min(d2)); // larger offset = earlier
                let risk_first = if label == 1 {
                    rng.random_bool(config.p_signal)
                } else {
                    rng.random_bool(1.0 - config.p_signal)
                };
                let (risk_day, trigger_day) =
                    if risk_first { (early, late) } else { (late, early) };
                let code = &book.risk[rng.random_range(0..book.risk.len())];
                let trigger = book.trigger.as_ref().expect("temporal mode has a trigger");
                events.push(GeneratedEvent {
                    patient_id: patient_id.clone(),
                    date: index_date - chrono::Duration::days(risk_day),
                    code: raw(code),
                });
                events.push(GeneratedEvent {
                    patient_id: patient_id.clone(),
                    date: index_date - chrono::Duration::days(trigger_day),
                    code: raw(trigger),
                });
                planted.push(code.clone());
                planted_offsets.push(-risk_day);
            }
        }

        labels.push((patient_id.clone(), label));
        truths.push(PatientTruth { patient_id, label, planted, planted_offsets });
    }

    let paths = SynthOutput {
        events: out_dir.join("events.csv"),
        labels: out_dir.join("labels.csv"),
        hierarchy: out_dir.join("hierarchy.csv"),
        embeddings: out_dir.join("embeddings.txt"),
        covid_codes: out_dir.join("covid_codes.txt"),
        leak_codes: out_dir.join("leak_codes.txt"),
        manifest_path: out_dir.join("manifest.json"),
        manifest: Manifest {
            config: config.clone(),
            risk_codes: book.risk.clone(),
            bayes_auc: bayes_auc(config),
            patients: truths,
        },
    };

    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.events)?);
        writeln!(w, "patient_id,date,code")?;
        for ev in &events {
            writeln!(w, "{},{},{}", ev.patient_id, ev.date.format("%Y-%m-%d"), ev.code)?;
        }
        w.flush()?;
    }
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.labels)?);
        writeln!(w, "patient_id,label")?;
        for (pid, label) in &labels {
            writeln!(w, "{pid},{label}")?;
        }
        w.flush()?;
    }
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.hierarchy)?);
        writeln!(w, "child,parent")?;
        for (code, _) in &vectors {
            writeln!(w, "{},{}", raw(code), code)?;
        }
        w.flush()?;
    }
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&paths.embeddings)?);
        writeln!(w, "{} {}", vectors.len(), config.embed_dim)?;
        for (code, vector) in &vectors {
            write!(w, "{code}")?;
            for v in vector {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    std::fs::write(&paths.covid_codes, format!("{}\n", book.covid))?;
    std::fs::write(
        &paths.leak_codes,
        "# no label-leak codes in synthetic cohorts\n",
    )?;
    {
        let file = std::fs::File::create(&paths.manifest_path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &paths.manifest)?;
        w.flush()?;
    }
    Ok(paths)
}
