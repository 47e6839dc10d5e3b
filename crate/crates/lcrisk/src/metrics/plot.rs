//! ROC curve emitters: CSV dump and a self-contained SVG plot.

use std::io::Write;
use std::path::Path;

use super::RocCurve;

/// CSV with header `threshold,fpr,tpr`, one row per operating point. The
/// (0,0) anchor is written with threshold `inf`.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "threshold,fpr,tpr")?;
    for k in 0..curve.thresholds.len() {
        writeln!(w, "{},{},{}", curve.thresholds[k], curve.fpr[k], curve.tpr[k])?;
    }
    w.flush()
}

/// Self-contained SVG of the curve: unit axes, chance diagonal, labeled AUC.
pub fn roc_svg(curve: &RocCurve, auc: f64, title: &str) -> String {
    let size = 440.0;
    let margin = 50.0;
    let plot = size - 2.0 * margin;
    let x = |fpr: f64| margin + fpr * plot;
    let y = |tpr: f64| size - margin - tpr * plot;

    let mut points = String::new();
    for k in 0..curve.fpr.len() {
        points.push_str(&format!("{:.2},{:.2} ", x(curve.fpr[k]), y(curve.tpr[k])));
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"{margin}\" y=\"{margin}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999999\" stroke-dasharray=\"6,4\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    ));
    svg.push_str(&format!(
        "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\"/>\n",
        points.trim_end()
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{tick}</text>\n",
            x(tick),
            size - margin + 18.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{tick}</text>\n",
            margin - 8.0,
            y(tick) + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">false positive rate</text>\n",
        size / 2.0,
        size - 10.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">true positive rate</text>\n",
        size / 2.0,
        size / 2.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{} (AUC = {:.3})</text>\n",
        size / 2.0,
        margin - 16.0,
        xml_escape(title),
        auc
    ));
    svg.push_str("</svg>\n");
    svg
}

pub(crate) fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
