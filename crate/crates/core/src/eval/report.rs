use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::score::ScoreRecord;
use super::Method;
use crate::mechanistic::ModelKind;
use crate::series::{TripletRecord, TruthGrid};
use crate::{CoreError, Result};

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub r2: f64,
    pub stderr: f64,
    pub n_targets: usize,
    pub n_failed: usize,
}

impl From<&ScoreRecord> for ResultRow {
    fn from(s: &ScoreRecord) -> Self {
        Self {
            method: s.method.clone(),
            dataset: s.dataset.clone(),
            r2: s.r2,
            stderr: s.stderr,
            n_targets: s.n_targets,
            n_failed: s.n_failed,
        }
    }
}

/// Method rank in the results table, then dataset rank.
fn sort_key(s: &ScoreRecord) -> (usize, usize, String, String) {
    let m = Method::from_id(&s.method).map_or(usize::MAX, |m| m as usize);
    let d = ModelKind::from_id(&s.dataset).map_or(usize::MAX, |k| k as usize);
    (m, d, s.method.clone(), s.dataset.clone())
}

pub fn write_results_csv(path: &Path, scores: &[ScoreRecord]) -> Result<()> {
    let mut sorted: Vec<&ScoreRecord> = scores.iter().collect();
    sorted.sort_by_key(|s| sort_key(s));
    let mut w = csv::Writer::from_path(path)?;
    for s in sorted {
        w.serialize(ResultRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| CoreError::Parse {
                file: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn dataset_label(id: &str) -> String {
    ModelKind::from_id(id).map_or_else(|| id.to_string(), |k| k.display_name().to_string())
}

fn method_label(id: &str) -> String {
    Method::from_id(id).map_or_else(|| id.to_string(), |m| m.display_name().to_string())
}

/// `0.9797 ± 6E-5`
pub fn format_score(r2: f64, stderr: f64) -> String {
    format!("{r2:.4} ± {stderr:.0E}")
}

/// Markdown summary: one row per method, one column per dataset, then a
/// per-channel breakdown.
pub fn render_markdown(scores: &[ScoreRecord]) -> String {
    let mut sorted: Vec<&ScoreRecord> = scores.iter().collect();
    sorted.sort_by_key(|s| sort_key(s));
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for s in &sorted {
        if !datasets.contains(&s.dataset.as_str()) {
            datasets.push(&s.dataset);
        }
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    datasets.sort_by_key(|d| ModelKind::from_id(d).map_or(usize::MAX, |k| k as usize));
    let find = |m: &str, d: &str| sorted.iter().find(|s| s.method == m && s.dataset == d);

    let mut md = String::from("# Results\n\nNoise-normalized R² on the test split (± bootstrap standard error).\n\n");
    md.push_str("| Method |");
    for d in &datasets {
        let _ = write!(md, " {} |", dataset_label(d));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(datasets.len()));
    md.push('\n');
    for m in &methods {
        let _ = write!(md, "| {} |", method_label(m));
        for d in &datasets {
            match find(m, d) {
                Some(s) => {
                    let _ = write!(md, " {} |", format_score(s.r2, s.stderr));
                }
                None => md.push_str(" n/a |"),
            }
        }
        md.push('\n');
    }

    md.push_str("\n## Per-channel R²\n\n| Method | Dataset | Channel | R² |\n|---|---|---|---|\n");
    for s in &sorted {
        for (ch, r) in &s.per_channel {
            let _ = writeln!(
                md,
                "| {} | {} | {ch} | {r:.4} |",
                method_label(&s.method),
                dataset_label(&s.dataset)
            );
        }
    }
    md.push_str("\n## Failed forecasts\n\n| Method | Dataset | Targets | Failed trajectories |\n|---|---|---|---|\n");
    for s in &sorted {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            method_label(&s.method),
            dataset_label(&s.dataset),
            s.n_targets,
            s.n_failed
        );
    }
    md
}

/// Everything needed to draw one forecast overlay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotData {
    pub dataset: String,
    pub method: String,
    pub index: usize,
    pub channel_names: Vec<String>,
    pub t_split: f64,
    pub t_max: f64,
    pub truth: TruthGrid,
    pub context: Vec<TripletRecord>,
    pub targets: Vec<TripletRecord>,
    /// Method output on `truth.times`; `None` when the method failed.
    pub forecast: Option<Vec<Vec<f64>>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A stacked panel per channel: truth curve, context and target points,
/// and the method's forecast.
pub fn render_svg(p: &PlotData) -> String {
    const W: f64 = 640.0;
    const PANEL_H: f64 = 160.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 30.0;
    const GAP: f64 = 30.0;
    let c = p.channel_names.len();
    let h = TOP + c as f64 * (PANEL_H + GAP) + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18">{} / {} / test trajectory {}</text>"#,
        esc(&dataset_label(&p.dataset)),
        esc(&method_label(&p.method)),
        p.index
    );
    let xs = |t: f64| LEFT + (W - LEFT - RIGHT) * t / p.t_max;
    for ch in 0..c {
        let y0 = TOP + ch as f64 * (PANEL_H + GAP);
        let mut vals: Vec<f64> = p.truth.values.iter().map(|v| v[ch]).collect();
        vals.extend(
            p.context
                .iter()
                .chain(&p.targets)
                .filter(|r| r.channel == ch)
                .map(|r| r.value),
        );
        if let Some(f) = &p.forecast {
            vals.extend(f.iter().map(|v| v[ch]).filter(|v| v.is_finite()));
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
        };
        let ys = |v: f64| y0 + PANEL_H * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{y0}" width="{}" height="{PANEL_H}" fill="none" stroke="#888"/>"##,
            W - LEFT - RIGHT
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            y0 + PANEL_H,
            x = xs(p.t_split)
        );
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}">{}</text><text x="4" y="{}">{hi:.3}</text><text x="4" y="{}">{lo:.3}</text>"#,
            y0 + PANEL_H / 2.0,
            esc(&p.channel_names[ch]),
            y0 + 10.0,
            y0 + PANEL_H
        );
        let line = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
            pts.filter(|(_, v)| v.is_finite())
                .map(|(t, v)| format!("{:.2},{:.2}", xs(t), ys(v)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let truth = line(&mut p.truth.times.iter().zip(&p.truth.values).map(|(t, v)| (*t, v[ch])));
        let _ = writeln!(
            s,
            r##"<polyline points="{truth}" fill="none" stroke="#222" stroke-width="1.5"/>"##
        );
        if let Some(f) = &p.forecast {
            let fc = line(&mut p.truth.times.iter().zip(f).map(|(t, v)| (*t, v[ch])));
            let _ = writeln!(
                s,
                r##"<polyline points="{fc}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##
            );
        }
        for (recs, colour) in [(&p.context, "#1f77b4"), (&p.targets, "#ff7f0e")] {
            for r in recs.iter().filter(|r| r.channel == ch) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#,
                    xs(r.time),
                    ys(r.value)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_path(out: &Path, p: &PlotData) -> PathBuf {
    out.join("plots")
        .join(&p.dataset)
        .join(&p.method)
        .join(format!("{}.svg", p.index))
}

/// Writes `results.csv`, `results.md` and one SVG per plot under `out`.
/// Returns the paths written.
pub fn render_report(scores: &[ScoreRecord], plots: &[PlotData], out: &Path) -> Result<Vec<PathBuf>> {
    if scores.is_empty() {
        return Err(CoreError::Contract("no scores to report".into()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let csv_path = out.join("results.csv");
    write_results_csv(&csv_path, scores)?;
    written.push(csv_path);
    let md_path = out.join("results.md");
    fs::write(&md_path, render_markdown(scores))?;
    written.push(md_path);
    for p in plots {
        let path = plot_path(out, p);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, render_svg(p))?;
        written.push(path);
    }
    Ok(written)
}
