use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalReport, GradcheckReport, TrainSummary, REVISION};
use crate::error::{Error, Result};

/// A named polyline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal standalone SVG line chart with axis ticks and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| &s.points).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            px(xv),
            h - bottom + 16.0,
            fmt_tick(xv),
            left - 6.0,
            py(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = top + 14.0 * k as f64 + 6.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right - 120.0,
            w - right - 100.0,
            w - right - 95.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Parse `train_log.csv` into total, cls and reg series over steps.
fn loss_series(csv: &str) -> Result<Vec<Series>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Config(format!("train log lacks column {name}")))
    };
    let (step, cols) = (col("step")?, [("total", col("total")?), ("cls", col("cls")?), ("reg", col("reg")?)]);
    let mut out: Vec<Series> = cols.iter().map(|(n, _)| Series { name: n.to_string(), points: vec![] }).collect();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Config(format!("bad train log line '{line}'")))
        };
        let x = num(step)?;
        for (s, (_, c)) in out.iter_mut().zip(cols) {
            s.points.push((x, num(c)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub revision: String,
    pub train: Option<TrainSummary>,
    pub map: Option<f64>,
    pub center_error_per_iteration: Option<Vec<f64>>,
    pub gradcheck_passed: Option<bool>,
    pub gradcheck_max_rel_error: Option<f64>,
    pub figures: Vec<String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

/// Collect whatever results exist in `run` and write figures plus
/// `summary.json` into `out`.
pub fn cmd_report(run: &Path, out: &Path) -> Result<ReportSummary> {
    fs::create_dir_all(out)?;
    let mut figures = Vec::new();
    let mut save = |name: &str, svg: String| -> Result<()> {
        fs::write(out.join(name), svg)?;
        figures.push(name.to_string());
        Ok(())
    };
    let log = run.join("train_log.csv");
    if log.exists() {
        let series = loss_series(&fs::read_to_string(&log)?)?;
        save("loss.svg", line_chart_svg("Training loss", "step", "loss", &series))?;
    }
    let train: Option<TrainSummary> = read_json(&run.join("train_summary.json"))?;
    let eval: Option<EvalReport> = read_json(&run.join("eval_report.json"))?;
    if let Some(e) = &eval {
        let pts = e.center_error_per_iteration.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
        let ser = [Series { name: "center error".into(), points: pts }];
        save("center_error.svg", line_chart_svg("Center error by iteration", "iteration", "meters", &ser))?;
        let mut pts = Vec::new();
        for c in &e.calibration_sweep {
            if let crate::scene::Corruption::CalibOffset { max_offset, .. } = c.corruption {
                pts.push((max_offset, c.map));
            }
        }
        let ser = [Series { name: "mAP".into(), points: pts }];
        save("calibration_sweep.svg", line_chart_svg("mAP under calibration offset", "max offset (m)", "mAP", &ser))?;
    }
    let grad: Option<GradcheckReport> = read_json(&run.join("gradcheck.json"))?;
    let summary = ReportSummary {
        revision: REVISION.into(),
        train,
        map: eval.as_ref().map(|e| e.map),
        center_error_per_iteration: eval.map(|e| e.center_error_per_iteration),
        gradcheck_passed: grad.as_ref().map(|g| g.passed),
        gradcheck_max_rel_error: grad.map(|g| g.max_rel_error),
        figures,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
