//! Per-patient attribution heatmaps as self-contained SVG.
//!
//! One cell per real token, laid out in rows, fill darkness proportional to
//! the GradCAM score, the code text inside the cell, and a red outline on the
//! cell carrying the COVID index date.

use std::path::Path;

use super::{AttributionError, AttributionResult};
use crate::metrics::xml_escape;
use crate::preprocess::{EncodedPatient, Vocabulary};

const CELL_W: f64 = 66.0;
const CELL_H: f64 = 30.0;
const PER_ROW: usize = 14;
const MARGIN: f64 = 12.0;
const LEGEND_H: f64 = 26.0;

/// Linear interpolation between a near-white and a dark blue; score 0 maps to
/// the lightest fill, 1 to the darkest.
fn fill(score: f64) -> String {
    let s = score.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * s).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Render the heatmap for one attributed patient and write it to `path`.
pub fn emit_heatmap(
    result: &AttributionResult,
    patient: &EncodedPatient,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<(), AttributionError> {
    let n = result.scores.len();
    if n == 0 || n != patient.n_real() {
        return Err(AttributionError::Usage(format!(
            "scores cover {n} tokens but patient '{}' has {} real tokens",
            patient.patient_id,
            patient.n_real()
        )));
    }
    let rows = n.div_ceil(PER_ROW);
    let cols = n.min(PER_ROW);
    let width = MARGIN * 2.0 + cols as f64 * CELL_W;
    let height = MARGIN * 2.0 + rows as f64 * CELL_H + LEGEND_H;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\">patient {} - darker cells scored higher; red outline marks the COVID index date</text>\n",
        MARGIN + 8.0,
        xml_escape(&patient.patient_id),
    ));

    for (i, score) in result.scores.iter().enumerate() {
        let row = i / PER_ROW;
        let col = i % PER_ROW;
        let x = MARGIN + col as f64 * CELL_W;
        let y = MARGIN + LEGEND_H + row as f64 * CELL_H;
        let is_index = patient.dates[i] == patient.covid_index_date;
        let stroke = if is_index { "#d62728" } else { "#888888" };
        let stroke_width = if is_index { 2.5 } else { 0.6 };
        svg.push_str(&format!(
            "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL_W:.1}\" height=\"{CELL_H:.1}\" fill=\"{}\" stroke=\"{stroke}\" stroke-width=\"{stroke_width}\"/>\n",
            fill(*score)
        ));
        let code = vocab.code_of(patient.token_ids[i]).unwrap_or("?");
        let shown: String = if code.len() > 11 {
            format!("{}\u{2026}", &code[..10])
        } else {
            code.to_string()
        };
        let text_fill = if *score > 0.55 { "white" } else { "black" };
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" font-family=\"monospace\" text-anchor=\"middle\" fill=\"{text_fill}\">{}</text>\n",
            x + CELL_W / 2.0,
            y + CELL_H / 2.0 + 3.0,
            xml_escape(&shown)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn fixture() -> (AttributionResult, EncodedPatient, Vocabulary) {
        let vocab = Vocabulary::from_codes(vec!["aa".into(), "b<b".into(), "cc".into()]).unwrap();
        let patient = EncodedPatient {
            patient_id: "p9".into(),
            token_ids: vec![2, 3, 4, 0, 0],
            dates: vec![d("2021-01-01"), d("2021-01-05"), d("2021-01-09")],
            label: 1,
            covid_index_date: d("2021-01-05"),
        };
        let result = AttributionResult {
            patient_id: "p9".into(),
            top_code: "b<b".into(),
            top_score: 1.0,
            time_separation_days: 0,
            scores: vec![0.0, 1.0, 0.4],
        };
        (result, patient, vocab)
    }

    #[test]
    fn cell_count_matches_real_tokens_and_fills_span_the_scale() {
        let (result, patient, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.svg");
        emit_heatmap(&result, &patient, &vocab, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        let cells = svg.matches("<rect").count() - 1; // minus background
        assert_eq!(cells, 3);
        assert!(svg.contains("#f7fbff"), "score 0 is the lightest fill");
        assert!(svg.contains("#08306b"), "score 1 is the darkest fill");
        assert!(svg.contains("b&lt;b"), "code text is XML-escaped");
        assert!(svg.contains("#d62728"), "index-date cell is outlined");
    }

    #[test]
    fn svg_is_well_formed_xml() {
        let (result, patient, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.svg");
        emit_heatmap(&result, &patient, &vocab, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        check_well_formed(&svg);
    }

    #[test]
    fn score_patient_mismatch_is_rejected() {
        let (mut result, patient, vocab) = fixture();
        result.scores.pop();
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_heatmap(&result, &patient, &vocab, &dir.path().join("x.svg")).is_err());
    }

    /// Minimal XML well-formedness check: tags balance, attributes quoted,
    /// no stray `<`/`&` in text.
    fn check_well_formed(xml: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = xml;
        while let Some(open) = rest.find('<') {
            let text = &rest[..open];
            assert!(!text.contains('&') || text.contains("&amp;") || text.contains("&lt;") || text.contains("&gt;") || text.contains("&quot;") || text.contains("&#"),
                "unescaped & in text");
            let close = rest[open..].find('>').expect("tag closed") + open;
            let tag = &rest[open + 1..close];
            rest = &rest[close + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().expect("closing tag with empty stack");
                assert_eq!(top, name, "mismatched closing tag");
            } else if tag.ends_with('/') || tag.starts_with('?') || tag.starts_with('!') {
                // self-closing or declaration
                let quotes = tag.matches('"').count();
                assert_eq!(quotes % 2, 0, "unbalanced quotes in <{tag}>");
            } else {
                let name: String =
                    tag.split_whitespace().next().unwrap_or("").to_string();
                let quotes = tag.matches('"').count();
                assert_eq!(quotes % 2, 0, "unbalanced quotes in <{tag}>");
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }
}
