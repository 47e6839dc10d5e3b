//! Cohort-level summaries of top-attributed codes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::AttributionResult;

/// One code's share of the correctly predicted positives: how many patients
/// had it as their top diagnosis, and at which day offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSummary {
    pub code: String,
    pub patient_count: usize,
    pub separations: Vec<i64>,
}

/// Per-code groups over all attributed patients, ranked by patient count
/// (descending; ties by code string). Counts over all codes sum to the number
/// of attributed patients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSummary {
    pub total_patients: usize,
    pub codes: Vec<CodeSummary>,
}

impl CohortSummary {
    /// The `n` most frequent codes.
    pub fn top(&self, n: usize) -> &[CodeSummary] {
        &self.codes[..n.min(self.codes.len())]
    }
}

/// Group top codes over attributed patients.
pub fn summarize(results: &[AttributionResult]) -> CohortSummary {
    let mut groups: BTreeMap<&str, Vec<i64>> = BTreeMap::new();
    for r in results {
        groups.entry(&r.top_code).or_default().push(r.time_separation_days);
    }
    let mut codes: Vec<CodeSummary> = groups
        .into_iter()
        .map(|(code, mut separations)| {
            separations.sort_unstable();
            CodeSummary { code: code.to_string(), patient_count: separations.len(), separations }
        })
        .collect();
    codes.sort_by(|a, b| b.patient_count.cmp(&a.patient_count).then(a.code.cmp(&b.code)));
    CohortSummary { total_patients: results.len(), codes }
}

/// CSV `code,patient_count,separations` for the top `n` codes; separations
/// are semicolon-joined signed day counts.
pub fn write_summary_csv(
    summary: &CohortSummary,
    top_n: usize,
    path: &Path,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "code,patient_count,separations")?;
    for code in summary.top(top_n) {
        let seps: Vec<String> = code.separations.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{},{},{}", code.code, code.patient_count, seps.join(";"))?;
    }
    w.flush()
}

/// Fixed-width histogram over day offsets with bin edges aligned to multiples
/// of `bin_width`, half-open `[start, start+width)`. Day 0 is always an edge,
/// so no bin straddles the index date.
pub fn histogram(separations: &[i64], bin_width: i64) -> Vec<(i64, i64, usize)> {
    assert!(bin_width > 0);
    if separations.is_empty() {
        return Vec::new();
    }
    let floor_div = |v: i64| -> i64 { (v as f64 / bin_width as f64).floor() as i64 };
    let lo_bin = floor_div(*separations.iter().min().unwrap());
    let hi_bin = floor_div(*separations.iter().max().unwrap());
    let mut counts = vec![0usize; (hi_bin - lo_bin + 1) as usize];
    for s in separations {
        counts[(floor_div(*s) - lo_bin) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let start = (lo_bin + i as i64) * bin_width;
            (start, start + bin_width, c)
        })
        .collect()
}

/// CSV `bin_start,bin_end,count` for one code's separation histogram.
pub fn write_histogram_csv(
    separations: &[i64],
    bin_width: i64,
    path: &Path,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin_start,bin_end,count")?;
    for (start, end, count) in histogram(separations, bin_width) {
        writeln!(w, "{start},{end},{count}")?;
    }
    w.flush()
}

/// File-name-safe form of a code string.
pub fn sanitize_code(code: &str) -> String {
    code.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(code: &str, sep: i64) -> AttributionResult {
        AttributionResult {
            patient_id: format!("p-{code}-{sep}"),
            top_code: code.to_string(),
            top_score: 1.0,
            time_separation_days: sep,
            scores: vec![1.0],
        }
    }

    #[test]
    fn counts_partition_the_patients() {
        let results = vec![
            result("a", -3),
            result("a", -5),
            result("b", 2),
            result("c", 0),
            result("a", 10),
        ];
        let summary = summarize(&results);
        let total: usize = summary.codes.iter().map(|c| c.patient_count).sum();
        assert_eq!(total, summary.total_patients);
        assert_eq!(summary.codes[0].code, "a");
        assert_eq!(summary.codes[0].patient_count, 3);
        assert_eq!(summary.codes[0].separations, vec![-5, -3, 10]);
    }

    #[test]
    fn ranking_matches_sort_by_count_with_code_tiebreak() {
        let results = vec![
            result("zeta", 1),
            result("alpha", 1),
            result("alpha", 2),
            result("beta", 3),
            result("beta", 4),
        ];
        let summary = summarize(&results);
        let order: Vec<&str> = summary.codes.iter().map(|c| c.code.as_str()).collect();
        assert_eq!(order, vec!["alpha", "beta", "zeta"]);
        assert_eq!(summary.top(2).len(), 2);
        assert_eq!(summary.top(99).len(), 3);
    }

    #[test]
    fn empty_results_give_an_empty_summary() {
        let summary = summarize(&[]);
        assert_eq!(summary.total_patients, 0);
        assert!(summary.codes.is_empty());
        assert!(summary.top(9).is_empty());
    }

    #[test]
    fn histogram_bins_never_straddle_zero() {
        let seps = vec![-12, -11, -1, 0, 1, 4, 7];
        let bins = histogram(&seps, 5);
        let total: usize = bins.iter().map(|b| b.2).sum();
        assert_eq!(total, seps.len());
        for (start, end, _) in &bins {
            assert_eq!(end - start, 5);
            assert!(*start >= 0 || *end <= 0, "bin [{start},{end}) straddles zero");
        }
        // -1 lands in [-5, 0), 0 lands in [0, 5)
        let neg_bin = bins.iter().find(|b| b.0 == -5).unwrap();
        assert_eq!(neg_bin.2, 1);
        let zero_bin = bins.iter().find(|b| b.0 == 0).unwrap();
        assert_eq!(zero_bin.2, 3);
    }

    #[test]
    fn sanitized_codes_are_path_safe() {
        assert_eq!(sanitize_code("raw:a/b c"), "raw_a_b_c");
        assert_eq!(sanitize_code("risk-001"), "risk-001");
    }
}
