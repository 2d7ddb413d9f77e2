use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};

use super::{MetricsRecord, Split};

const HEADER: [&str; 5] = ["fold", "epoch", "split", "accuracy", "loss"];

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::contract("metrics csv", format!("{}: {e}", path.display()))
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    ensure!(!records.is_empty(), "write_metrics", "no records");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.fold.to_string(),
            r.epoch.to_string(),
            r.split.as_str().to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.loss),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract("write_metrics", e.to_string()))?;
    write_file(path, &String::from_utf8(bytes).expect("ascii"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    ensure!(header == HEADER.as_slice(), "read_metrics", "{}: expected header `{}`", path.display(), HEADER.join(","));
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Panel<'a> {
    x0: f64,
    title: &'a str,
    y_label: &'a str,
    y_max: f64,
}

/// Two side-by-side panels of validation curves: accuracy (percent) and loss,
/// one polyline per fold in each.
pub fn emit_curves(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let val: Vec<&MetricsRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    ensure!(!val.is_empty(), "emit_curves", "no validation records");
    let mut folds: Vec<usize> = val.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let max_epoch = val.iter().map(|r| r.epoch).max().unwrap_or(1).max(2) as f64;
    let max_loss = val.iter().map(|r| r.loss).fold(0.0, f64::max).max(1e-6) * 1.05;
    let panels = [
        Panel { x0: MARGIN, title: "validation accuracy", y_label: "percent", y_max: 100.0 },
        Panel { x0: 2.0 * MARGIN + PANEL_W + 20.0, title: "validation loss", y_label: "loss", y_max: max_loss },
    ];
    let width = 3.0 * MARGIN + 2.0 * PANEL_W + 20.0;
    let height = PANEL_H + 2.0 * MARGIN + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let top = MARGIN;
    let bottom = MARGIN + PANEL_H;
    for (pi, p) in panels.iter().enumerate() {
        let px = |e: f64| p.x0 + (e - 1.0) / (max_epoch - 1.0) * PANEL_W;
        let py = |v: f64| bottom - v / p.y_max * PANEL_H;
        let _ = writeln!(
            s,
            r##"<g><rect x="{:.1}" y="{top:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##,
            p.x0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, p.x0 + PANEL_W / 2.0, top - 12.0, p.title);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epoch</text>"#,
            p.x0 + PANEL_W / 2.0,
            bottom + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            p.x0 - 36.0,
            top + PANEL_H / 2.0,
            p.x0 - 36.0,
            top + PANEL_H / 2.0,
            p.y_label
        );
        for e in 1..=max_epoch as usize {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{e}</text>"#, px(e as f64), bottom + 15.0);
        }
        for t in 0..=4 {
            let v = p.y_max * t as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, p.x0 - 4.0, py(v) + 4.0);
        }
        for (fi, &fold) in folds.iter().enumerate() {
            let pts: Vec<String> = val
                .iter()
                .filter(|r| r.fold == fold)
                .map(|r| {
                    let v = if pi == 0 { r.accuracy } else { r.loss };
                    format!("{:.2},{:.2}", px(r.epoch as f64), py(v))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>fold {fold}</title></polyline>"#,
                COLORS[fi % COLORS.len()],
                pts.join(" ")
            );
        }
        s.push_str("</g>\n");
    }
    for (fi, &fold) in folds.iter().enumerate() {
        let x = MARGIN + fi as f64 * 80.0;
        let y = height - 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" fill="{}">fold {fold}</text>"#,
            COLORS[fi % COLORS.len()]
        );
    }
    s.push_str("</svg>\n");
    write_file(path, &s)
}
