//! Evaluation report assembly and its on-disk forms (JSON, CSV, SVG plots).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    average_precision, coco_thresholds, confusion_matrix, match_detections, mean_ap,
    normalize_rows, pr_curve, precision_recall,
};
use crate::detector::{Annotation, Detection};
use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const PR_CSV: &str = "pr_curves.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const PR_SVG: &str = "pr_curves.svg";
pub const CONFUSION_SVG: &str = "confusion_matrix.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    /// Ground-truth instances.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are ground-truth classes then background; columns are predictions.
    pub confusion: Vec<Vec<u64>>,
    pub confusion_normalized: Vec<Vec<f64>>,
    /// Per class, `(recall, precision)` at IoU 0.5.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

/// Full evaluation of per-image detections (decoded at a low confidence)
/// against ground truth.
///
/// AP uses every detection; precision, recall and the confusion matrix use
/// detections scoring at least `conf_thresh`. Aggregates average over the
/// classes present in the ground truth.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    class_names: &[&str],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let k = class_names.len();
    let thresholds = coco_thresholds();
    // flags[t][c], n_gt[c]
    let mut flags = vec![vec![Vec::new(); k]; thresholds.len()];
    let mut base_flags = vec![Vec::new(); k];
    let mut n_gt = vec![0usize; k];
    let (mut tp, mut fp, mut fneg) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (d, g) in dets.iter().zip(gts) {
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_detections(d, g, thr, k);
            for (c, f) in flags[t].iter_mut().enumerate() {
                f.extend(m.scored_flags(c));
            }
        }
        let m = match_detections(d, g, iou_thresh, k);
        for c in 0..k {
            base_flags[c].extend(m.scored_flags(c));
            n_gt[c] += m.n_gt[c];
        }
        let confident: Vec<Detection> = d
            .iter()
            .filter(|x| x.score >= conf_thresh)
            .copied()
            .collect();
        let m = match_detections(&confident, g, iou_thresh, k);
        for c in 0..k {
            tp[c] += m.tp(c);
            fp[c] += m.fp(c);
            fneg[c] += m.fn_count[c];
        }
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let (precision, recall) = precision_recall(tp[c], fp[c], fneg[c]);
            let ap_range = thresholds
                .iter()
                .enumerate()
                .map(|(t, _)| average_precision(&flags[t][c], n_gt[c]));
            ClassMetrics {
                class_id: c,
                name: class_names[c].to_string(),
                support: n_gt[c],
                precision,
                recall,
                ap50: average_precision(&base_flags[c], n_gt[c]),
                ap50_95: ap_range.sum::<f64>() / thresholds.len() as f64,
            }
        })
        .collect();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let mean =
        |f: fn(&ClassMetrics) -> f64| mean_ap(&present.iter().map(|c| f(c)).collect::<Vec<_>>());
    let confusion = confusion_matrix(dets, gts, k, conf_thresh, iou_thresh);
    Ok(EvalReport {
        images: gts.len(),
        conf_thresh,
        iou_thresh,
        precision: mean(|c| c.precision)?,
        recall: mean(|c| c.recall)?,
        map50: mean(|c| c.ap50)?,
        map50_95: mean(|c| c.ap50_95)?,
        per_class,
        confusion_normalized: normalize_rows(&confusion),
        confusion,
        pr_curves: (0..k).map(|c| pr_curve(&base_flags[c], n_gt[c])).collect(),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the JSON report, both CSVs and both plots; returns the paths written.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<&str> = self.per_class.iter().map(|c| c.name.as_str()).collect();
        let json = dir.join(REPORT_JSON);
        write(&json, self.to_json()? + "\n")?;

        let pr = dir.join(PR_CSV);
        let mut w = csv::Writer::from_path(&pr).map_err(|e| csv_err(&pr, e))?;
        w.write_record(["class_id", "class", "recall", "precision"])
            .map_err(|e| csv_err(&pr, e))?;
        for (c, curve) in self.pr_curves.iter().enumerate() {
            for &(r, p) in curve {
                w.write_record([
                    c.to_string(),
                    names[c].to_string(),
                    r.to_string(),
                    p.to_string(),
                ])
                .map_err(|e| csv_err(&pr, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&pr, e))?;

        let cm = dir.join(CONFUSION_CSV);
        let mut w = csv::Writer::from_path(&cm).map_err(|e| csv_err(&cm, e))?;
        let mut labels: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        labels.push("background".into());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(&cm, e))?;
        for (label, row) in labels.iter().zip(&self.confusion) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(&cm, e))?;
        }
        w.flush().map_err(|e| Error::io(&cm, e))?;

        let pr_svg = dir.join(PR_SVG);
        write(&pr_svg, pr_plot(&self.pr_curves, &names, &self.per_class))?;
        let cm_svg = dir.join(CONFUSION_SVG);
        write(&cm_svg, confusion_plot(&self.confusion_normalized, &labels))?;
        Ok(vec![json, pr, cm, pr_svg, cm_svg])
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// Precision-recall curves, one polyline per class.
pub fn pr_plot(curves: &[Vec<(f64, f64)>], names: &[&str], per_class: &[ClassMetrics]) -> String {
    let (w, h, m) = (520.0, 420.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="white" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let (x, y) = (m + v * pw, m + (1.0 - v) * ph);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            h - m + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            m - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Recall</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">Precision</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (c, curve) in curves.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        let mut pts = format!("{:.2},{:.2}", m, m);
        let mut prev_r = 0.0;
        for &(r, p) in curve {
            let y = m + (1.0 - p) * ph;
            let _ = write!(
                pts,
                " {:.2},{:.2} {:.2},{:.2}",
                m + prev_r * pw,
                y,
                m + r * pw,
                y
            );
            prev_r = r;
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>"#
        );
        let ap = per_class.get(c).map(|pc| pc.ap50).unwrap_or(0.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} {ap:.3}</text>"#,
            m + 10.0,
            h - m - 12.0 - 16.0 * (curves.len() - 1 - c) as f64,
            names.get(c).copied().unwrap_or("?")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Row-normalized confusion matrix as a blue heat map.
pub fn confusion_plot(norm: &[Vec<f64>], labels: &[String]) -> String {
    let n = norm.len();
    let (cell, m) = (70.0, 110.0);
    let size = m + cell * n as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    for (i, row) in norm.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let (x, y) = (m + j as f64 * cell, m + i as f64 * cell);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="gray"/>"#
            );
            let fg = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{fg}">{v:.2}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let c = m + (i as f64 + 0.5) * cell;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{c:.1}" text-anchor="end">{l}</text>"#,
            m - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{c:.1}" y="{:.1}" text-anchor="start" transform="rotate(-45 {c:.1} {:.1})">{l}</text>"#,
            m - 8.0,
            m - 8.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="6" y="14">rows: true, columns: predicted</text>"#
    );
    s.push_str("</svg>\n");
    s
}
