//! Report files: curves.csv, confusion.csv, summary.txt, metrics.json, and
//! SVG charts (loss and accuracy per branch, plus the confusion matrix).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::Metrics;
use super::train::{CurvePoint, CurveSplit};
use super::Branch;
use crate::error::{Error, Result};
use crate::tradaboost::RoundLog;

/// Everything the report files are rendered from; stored as metrics.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub class_names: [String; 2],
    pub test_size: usize,
    pub metrics: Metrics,
    pub curves: Vec<CurvePoint>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Contract(format!("{}: {other:?}", path.display())),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_curves_csv(curves: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for c in curves {
        w.serialize(c).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows are actual labels, columns predicted labels.
pub fn write_confusion_csv(report: &RunReport, path: &Path) -> Result<()> {
    let [a, b] = &report.class_names;
    let m = report.metrics.confusion.matrix();
    let mut w = csv_writer(path)?;
    let rows = [
        vec!["actual".to_string(), format!("predicted_{a}"), format!("predicted_{b}")],
        vec![a.clone(), m[0][0].to_string(), m[0][1].to_string()],
        vec![b.clone(), m[1][0].to_string(), m[1][1].to_string()],
    ];
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_round_log(log: &[RoundLog], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in log {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn summary_text(report: &RunReport) -> String {
    let m = &report.metrics;
    let c = &m.confusion;
    let mut s = String::new();
    let _ = writeln!(s, "test samples: {}", report.test_size);
    let _ = writeln!(s, "fused accuracy: {:.4}", m.accuracy);
    for b in &m.branches {
        let _ = writeln!(s, "{} accuracy: {:.4}", b.branch, b.accuracy);
    }
    let _ = writeln!(
        s,
        "confusion ({} positive): tp {} fp {} fn {} tn {}",
        report.class_names[0], c.tp, c.fp, c.fn_, c.tn
    );
    s
}

const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

/// One panel: axes, ticks, and a polyline per series.
fn panel(svg: &mut String, x0: f64, title: &str, series: &[(&str, Vec<(f64, f64)>)], y_max: f64) {
    let (w, h, pad) = (360.0, 240.0, 40.0);
    let xs = series.iter().flat_map(|s| s.1.iter().map(|p| p.0));
    let x_max = xs.fold(1.0f64, f64::max);
    let px = |x: f64| x0 + pad + (x - 1.0) / (x_max - 1.0).max(1.0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad + 20.0 - (y / y_max).clamp(0.0, 1.0) * (h - 2.0 * pad);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="16" font-size="13" text-anchor="middle">{title}</text>"#, x0 + w / 2.0);
    let _ = writeln!(
        svg,
        r#"<path d="M{:.1},{:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
        x0 + pad,
        py(y_max),
        py(0.0),
        px(x_max)
    );
    for k in 0..=4 {
        let y = y_max * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{y:.2}</text>"#,
            x0 + pad - 4.0,
            py(y) + 3.0
        );
    }
    for e in 1..=x_max as usize {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{e}</text>"#,
            px(e as f64),
            py(0.0) + 12.0
        );
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            path.join(" "),
            COLORS[k % 2]
        );
        let ly = 34.0 + 12.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{}">{name}</text>"#,
            x0 + w - pad - 60.0,
            COLORS[k % 2]
        );
    }
}

/// Loss and accuracy curves of one branch, train and validation.
pub fn curves_svg(curves: &[CurvePoint], branch: Branch) -> String {
    let pick = |split, f: fn(&CurvePoint) -> f64| -> Vec<(f64, f64)> {
        curves
            .iter()
            .filter(|c| c.branch == branch && c.split == split)
            .map(|c| (c.epoch as f64, f(c)))
            .collect()
    };
    let loss = [
        ("train", pick(CurveSplit::Train, |c| c.loss)),
        ("validation", pick(CurveSplit::Validation, |c| c.loss)),
    ];
    let acc = [
        ("train", pick(CurveSplit::Train, |c| c.accuracy)),
        ("validation", pick(CurveSplit::Validation, |c| c.accuracy)),
    ];
    let loss_max = loss.iter().flat_map(|s| s.1.iter().map(|p| p.1)).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut svg = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="720" height="250" font-family="sans-serif">"#,
    );
    svg.push('\n');
    panel(&mut svg, 0.0, &format!("{branch} loss"), &loss, if loss_max > 0.0 { loss_max * 1.05 } else { 1.0 });
    panel(&mut svg, 360.0, &format!("{branch} accuracy"), &acc, 1.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn confusion_svg(report: &RunReport) -> String {
    let m = report.metrics.confusion.matrix();
    let total = report.metrics.confusion.total().max(1) as f64;
    let mut svg = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="320" height="300" font-family="sans-serif">"#,
    );
    svg.push('\n');
    let _ = writeln!(
        svg,
        r#"<text x="190" y="20" font-size="13" text-anchor="middle">predicted (accuracy {:.4})</text>"#,
        report.metrics.accuracy
    );
    for (i, row) in m.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="55" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            100 + 110 * i,
            report.class_names[i]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="40" font-size="11" text-anchor="middle">{}</text>"#,
            135 + 110 * i,
            report.class_names[i]
        );
        for (j, &count) in row.iter().enumerate() {
            let shade = 255 - (200.0 * count as f64 / total) as u8;
            let (x, y) = (80 + 110 * j, 45 + 110 * i);
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="110" height="110" fill="rgb({shade},{shade},255)" stroke="black"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="18" text-anchor="middle">{count}</text>"#,
                x + 55,
                y + 60
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes every report file into `dir` and returns their paths. Curve
/// files are skipped when the report has no curves (evaluation only).
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    if !report.curves.is_empty() {
        write_curves_csv(&report.curves, &out("curves.csv"))?;
    }
    write_confusion_csv(report, &out("confusion.csv"))?;
    write_file(&out("summary.txt"), &summary_text(report))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Contract(e.to_string()))?;
    write_file(&out("metrics.json"), &(json + "\n"))?;
    if !report.curves.is_empty() {
        for b in Branch::ALL {
            write_file(&out(&format!("curves_{b}.svg")), &curves_svg(&report.curves, b))?;
        }
    }
    write_file(&out("confusion.svg"), &confusion_svg(report))?;
    log::info!("wrote {} report files to {}", written.len(), dir.display());
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::eval::{BranchAccuracy, Confusion};

    fn report() -> RunReport {
        let mut curves = Vec::new();
        for b in Branch::ALL {
            for epoch in 1..=3 {
                for split in [CurveSplit::Train, CurveSplit::Validation] {
                    curves.push(CurvePoint {
                        epoch,
                        branch: b,
                        split,
                        loss: 1.0 / epoch as f64,
                        accuracy: 0.5 + 0.1 * epoch as f64,
                    });
                }
            }
        }
        let confusion = Confusion { tp: 9, fp: 1, fn_: 2, tn: 8 };
        RunReport {
            class_names: ["glioma".into(), "notumor".into()],
            test_size: 20,
            metrics: Metrics {
                confusion,
                accuracy: confusion.accuracy(),
                branches: Branch::ALL.iter().map(|&b| BranchAccuracy { branch: b, accuracy: 0.8 }).collect(),
            },
            curves,
        }
    }

    #[test]
    fn files_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let files = write_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        let lines: Vec<&str> = curves.lines().collect();
        assert_eq!(lines[0], "epoch,branch,split,loss,accuracy");
        assert_eq!(lines.len(), 1 + 3 * 3 * 2);
        assert!(!curves.contains('\r'));
        assert_eq!(lines[1], "1,vit,train,1.0,0.6");

        let confusion = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
        assert_eq!(confusion, "actual,predicted_glioma,predicted_notumor\nglioma,9,2\nnotumor,1,8\n");

        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("fused accuracy: 0.8500"));
        for b in Branch::ALL {
            assert!(summary.contains(&format!("{b} accuracy: 0.8000")));
        }
        assert_eq!(RunReport::load(&dir.path().join("metrics.json")).unwrap(), r);
        let svg = std::fs::read_to_string(dir.path().join("curves_vit.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 4);
    }

    #[test]
    fn unwritable_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        match write_report(&report(), &blocker.join("out")) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }
}
