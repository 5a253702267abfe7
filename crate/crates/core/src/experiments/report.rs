//! Static SVG line charts and a tidy CSV from metrics and sweep files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::ablate::{Sweep, SWEEP_COLUMNS};
use super::metrics::parse_metrics_csv;
use super::train::METRICS_FILE;

#[derive(Debug, Clone, PartialEq)]
pub enum XAxis {
    Linear,
    Log,
    /// Evenly spaced labelled positions; x values are indices.
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Render a line chart. Non-finite points are skipped; a log axis drops
/// nonpositive x values.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_axis: &XAxis,
) -> String {
    let tx = |x: f64| if *x_axis == XAxis::Log { x.log10() } else { x };
    let keep =
        |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite() && (*x_axis != XAxis::Log || x > 0.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied().filter(keep))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in &pts {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if let XAxis::Categorical(labels) = x_axis {
        x0 = -0.5;
        x1 = labels.len() as f64 - 0.5;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let yy = py(y);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            yy + 4.0,
            fmt_tick(y)
        );
    }
    let x_ticks: Vec<(f64, String)> = match x_axis {
        XAxis::Categorical(labels) => labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i as f64, l.clone()))
            .collect(),
        XAxis::Log => {
            let mut t = Vec::new();
            let mut e = x0.floor() as i32;
            while (e as f64) <= x1.ceil() {
                if (e as f64) >= x0 - 1e-9 && (e as f64) <= x1 + 1e-9 {
                    t.push((10f64.powi(e), format!("1e{e}")));
                }
                e += 1;
            }
            if t.is_empty() {
                t.push((10f64.powf(x0), fmt_tick(10f64.powf(x0))));
            }
            t
        }
        XAxis::Linear => (0..=4)
            .map(|k| {
                let x = x0 + (x1 - x0) * k as f64 / 4.0;
                (x, fmt_tick(x))
            })
            .collect(),
    };
    for (x, label) in x_ticks {
        let xx = px(x);
        let base = TOP + ph;
        let _ = writeln!(
            s,
            r#"<line x1="{xx:.2}" y1="{base}" x2="{xx:.2}" y2="{}" stroke="black"/><text x="{xx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            base + 5.0,
            base + 18.0,
            escape(&label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .copied()
            .filter(keep)
            .map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        if !coords.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
            for c in &coords {
                let (cx, cy) = c.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == METRICS_FILE || (name.starts_with("sweep_") && name.ends_with(".csv")) {
                out.push(p);
            }
        }
    }
    Ok(())
}

fn run_label(input: &Path, file: &Path) -> String {
    let parent = file.parent().unwrap_or(input);
    let rel = parent.strip_prefix(input).unwrap_or(parent);
    let label = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("_");
    if label.is_empty() {
        "run".to_string()
    } else {
        label
    }
}

struct SweepRows {
    sweep: Sweep,
    rows: Vec<(String, Option<f64>)>,
}

fn parse_sweep_csv(text: &str) -> Result<SweepRows> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("no data: empty sweep file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let missing: Vec<&str> = SWEEP_COLUMNS
        .iter()
        .copied()
        .filter(|c| !cols.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "sweep file is missing columns: {}",
            missing.join(", ")
        )));
    }
    let idx = |name: &str| cols.iter().position(|c| *c == name).unwrap();
    let (isweep, ivalue, istatus, itop1) =
        (idx("sweep"), idx("value"), idx("status"), idx("probe_top1"));
    let mut sweep = None;
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Format(format!(
                "sweep row has {} cells, expected {}",
                cells.len(),
                cols.len()
            )));
        }
        sweep = Some(cells[isweep].parse::<Sweep>()?);
        let top1 = if cells[istatus] == "ok" {
            Some(
                cells[itop1]
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad probe_top1 `{}`", cells[itop1])))?,
            )
        } else {
            None
        };
        rows.push((cells[ivalue].to_string(), top1));
    }
    let sweep = sweep.ok_or_else(|| Error::Format("no data: sweep file has no rows".into()))?;
    Ok(SweepRows { sweep, rows })
}

/// Render every `metrics.csv` and `sweep_*.csv` under `input` into `out`:
/// one loss-curve and one diagnostics chart per run, one accuracy chart
/// per sweep, and `tidy.csv` with all plotted values. Returns the files
/// written.
pub fn report(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if input.is_dir() {
        collect_files(input, &mut files)?;
    } else if input.is_file() {
        files.push(input.to_path_buf());
    }
    if files.is_empty() {
        return Err(Error::Precondition(format!(
            "no data: no metrics.csv or sweep_*.csv files under {}",
            input.display()
        )));
    }
    fs::create_dir_all(out)?;
    let mut tidy = String::from("source,x_name,x,metric,value\n");
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for file in &files {
        let text = fs::read_to_string(file)?;
        let is_metrics = file.file_name().map(|n| n == METRICS_FILE).unwrap_or(false);
        if is_metrics {
            let rows = parse_metrics_csv(&text)?;
            if rows.is_empty() {
                return Err(Error::Precondition(format!(
                    "no data: {} has no rows",
                    file.display()
                )));
            }
            let label = run_label(input, file);
            let series =
                |name: &str, f: &dyn Fn(&super::metrics::MetricsRecord) -> Option<f64>| Series {
                    name: name.to_string(),
                    points: rows
                        .iter()
                        .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
                        .collect(),
                };
            let losses = vec![
                series("total", &|r| Some(r.loss_total)),
                series("invariance", &|r| Some(r.loss_invariance)),
                series("redundancy", &|r| Some(r.loss_redundancy)),
            ];
            let diags = vec![
                series("mean |offdiag C|", &|r| Some(r.mean_abs_offdiag)),
                series("min feature std", &|r| Some(r.min_feature_std)),
                series("probe top1", &|r| r.probe_top1),
            ];
            for s in losses.iter().chain(&diags) {
                for &(x, y) in &s.points {
                    let _ = writeln!(tidy, "{label},epoch,{x},{},{y}", s.name);
                }
            }
            write(
                format!("{label}_loss.svg"),
                line_chart(
                    &format!("{label}: loss"),
                    "epoch",
                    "loss",
                    &losses,
                    &XAxis::Linear,
                ),
            )?;
            write(
                format!("{label}_diagnostics.svg"),
                line_chart(
                    &format!("{label}: diagnostics"),
                    "epoch",
                    "value",
                    &diags,
                    &XAxis::Linear,
                ),
            )?;
        } else {
            let parsed = parse_sweep_csv(&text)?;
            let sweep = parsed.sweep;
            let axis = match sweep {
                Sweep::Lambda => XAxis::Log,
                s if s.is_numeric() => XAxis::Linear,
                _ => XAxis::Categorical(parsed.rows.iter().map(|(v, _)| v.clone()).collect()),
            };
            let mut points = Vec::new();
            for (i, (value, top1)) in parsed.rows.iter().enumerate() {
                let x = if matches!(axis, XAxis::Categorical(_)) {
                    i as f64
                } else {
                    value.parse::<f64>().map_err(|_| {
                        Error::Format(format!("non-numeric {sweep} value `{value}`"))
                    })?
                };
                if let Some(t) = top1 {
                    points.push((x, *t));
                    let _ = writeln!(tidy, "sweep_{sweep},{sweep},{value},probe_top1,{t}");
                }
            }
            let series = [Series {
                name: "probe top1".into(),
                points,
            }];
            write(
                format!("sweep_{sweep}_accuracy.svg"),
                line_chart(
                    &format!("probe accuracy vs {sweep}"),
                    sweep.name(),
                    "top-1",
                    &series,
                    &axis,
                ),
            )?;
        }
    }
    write("tidy.csv".into(), tidy)?;
    Ok(written)
}
