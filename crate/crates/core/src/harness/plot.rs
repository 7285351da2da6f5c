//! Reward-versus-trajectories charts as static SVG, plus merged CSV.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, MetricsRecord, RecordKind};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOutput {
    pub svg: String,
    pub csv: String,
    pub warnings: Vec<String>,
    pub records: usize,
}

/// Loads every metrics file and renders the comparison.
pub fn compare_files(files: &[PathBuf]) -> Result<CompareOutput> {
    if files.is_empty() {
        return Err(Error::Config("compare needs at least one metrics file".into()));
    }
    let mut runs = Vec::with_capacity(files.len());
    for f in files {
        runs.push((run_name(f), read_metrics(f)?));
    }
    Ok(compare_runs(&runs))
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "metrics" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn compare_runs(runs: &[(String, Vec<MetricsRecord>)]) -> CompareOutput {
    let mut warnings = Vec::new();
    let tasks: BTreeSet<&str> = runs.iter().flat_map(|(_, rs)| rs.iter().map(|r| r.task.as_str())).collect();
    if tasks.len() > 1 {
        warnings.push(format!("runs come from {} different tasks", tasks.len()));
    }
    let algs: Vec<Option<String>> = runs
        .iter()
        .map(|(_, rs)| rs.iter().find(|r| r.kind == RecordKind::Align).and_then(|r| r.algorithm.clone()))
        .collect();
    let mut series = Vec::new();
    for ((name, records), alg) in runs.iter().zip(&algs) {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.kind == RecordKind::Align)
            .filter_map(|r| r.reward_mean.map(|y| (r.trajectories as f64, y)))
            .collect();
        if points.is_empty() {
            warnings.push(format!("{name}: no alignment records"));
            continue;
        }
        let alg = alg.clone().unwrap_or_else(|| "unknown".into());
        let unique = algs.iter().filter(|a| a.as_deref() == Some(alg.as_str())).count() == 1;
        let label = if unique { alg } else { format!("{alg} ({name})") };
        series.push(Series { label, points });
    }
    let records = runs.iter().map(|(_, rs)| rs.len()).sum();
    CompareOutput { svg: render_svg(&series, &warnings), csv: merged_csv(runs), warnings, records }
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of mean raw reward against trajectories consumed.
pub fn render_svg(series: &[Series], warnings: &[String]) -> String {
    let (x0, x1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{LEFT}\" y=\"24\" font-size=\"14\">Mean raw reward vs trajectories</text>");
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(s, "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>", TOP + ph);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(s, "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xv:.0}</text>", TOP + ph + 19.0);
        let _ = writeln!(s, "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{LEFT}\" y2=\"{py:.2}\" stroke=\"black\"/>", LEFT - 5.0);
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{yv:.3}</text>", LEFT - 8.0, py + 4.0);
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">trajectories</text>",
        LEFT + pw / 2.0,
        HEIGHT - 18.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">reward</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 20.0
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", lx + 26.0, ly + 4.0, escape(&ser.label));
    }
    for (i, w) in warnings.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{LEFT}\" y=\"{:.2}\" fill=\"#b00000\">warning: {}</text>",
            TOP + 14.0 + 14.0 * i as f64,
            escape(w)
        );
    }
    s.push_str("</svg>\n");
    s
}

const CSV_HEADER: [&str; 33] = [
    "run",
    "kind",
    "algorithm",
    "task",
    "epoch",
    "step",
    "trajectories",
    "wall_clock",
    "beta",
    "reward_mean",
    "reward_max",
    "reward_std",
    "loss",
    "fl_db",
    "dag_kl",
    "kl_reg",
    "ddpo",
    "grad_norm_theta",
    "grad_norm_phi",
    "eval_samples",
    "eval_reward_mean",
    "eval_reward_max",
    "eval_reward_se",
    "tv_optimal",
    "tv_target",
    "kl_optimal",
    "kl_target",
    "floor",
    "tv_optimal_mc",
    "tv_mc_se",
    "hist_kl",
    "hist_coverage",
    "source_index",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per record of every run, in input order.
pub fn merged_csv(runs: &[(String, Vec<MetricsRecord>)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for (name, records) in runs {
        for (i, r) in records.iter().enumerate() {
            let kind = serde_json::to_value(r.kind).expect("kind serializes");
            let e = r.eval.as_ref();
            let row = vec![
                name.clone(),
                kind.as_str().unwrap_or_default().to_string(),
                r.algorithm.clone().unwrap_or_default(),
                r.task.clone(),
                r.epoch.to_string(),
                r.step.to_string(),
                r.trajectories.to_string(),
                opt(r.wall_clock),
                opt(r.beta),
                opt(r.reward_mean),
                opt(r.reward_max),
                opt(r.reward_std),
                opt(r.loss),
                opt(r.fl_db),
                opt(r.dag_kl),
                opt(r.kl_reg),
                opt(r.ddpo),
                opt(r.grad_norm_theta),
                opt(r.grad_norm_phi),
                e.map(|e| e.samples.to_string()).unwrap_or_default(),
                opt(e.map(|e| e.reward_mean)),
                opt(e.map(|e| e.reward_max)),
                opt(e.map(|e| e.reward_se)),
                opt(e.and_then(|e| e.tv_optimal)),
                opt(e.and_then(|e| e.tv_target)),
                opt(e.and_then(|e| e.kl_optimal)),
                opt(e.and_then(|e| e.kl_target)),
                opt(e.and_then(|e| e.floor)),
                opt(e.and_then(|e| e.tv_optimal_mc)),
                opt(e.and_then(|e| e.tv_mc_se)),
                opt(e.and_then(|e| e.hist_kl)),
                opt(e.and_then(|e| e.hist_coverage)),
                i.to_string(),
            ];
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Writes `compare.svg` and `compare.csv` into `out`.
pub fn write_compare(out: &Path, result: &CompareOutput) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let svg = out.join("compare.svg");
    let csv = out.join("compare.csv");
    std::fs::write(&svg, &result.svg).map_err(|e| Error::io(&svg, e))?;
    std::fs::write(&csv, &result.csv).map_err(|e| Error::io(&csv, e))?;
    Ok((svg, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(alg: &str, task: &str, n: usize) -> Vec<MetricsRecord> {
        (1..=n)
            .map(|e| MetricsRecord {
                algorithm: Some(alg.into()),
                epoch: e,
                step: 8 * e,
                trajectories: 512 * e,
                reward_mean: Some(-1.0 + 0.1 * e as f64),
                ..MetricsRecord::empty(RecordKind::Align, task)
            })
            .collect()
    }

    #[test]
    fn three_series_one_chart() {
        let runs = vec![("a".into(), run("dag-db", "t", 3)), ("b".into(), run("dag-kl", "t", 3)), ("c".into(), run("ddpo", "t", 2))];
        let out = compare_runs(&runs);
        assert_eq!(out.svg.matches("<polyline").count(), 3);
        for l in ["dag-db", "dag-kl", "ddpo"] {
            assert!(out.svg.contains(&format!(">{l}</text>")));
        }
        assert!(out.warnings.is_empty());
        assert_eq!(out.csv.lines().count(), 1 + 8);
        assert_eq!(out.records, 8);
        assert_eq!(compare_runs(&runs), out);
    }

    #[test]
    fn mismatched_tasks_warn_but_plot() {
        let runs = vec![("a".into(), run("dag-db", "t1", 2)), ("b".into(), run("dag-db", "t2", 2))];
        let out = compare_runs(&runs);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.svg.contains("warning:"));
        assert!(out.svg.contains("dag-db (a)") && out.svg.contains("dag-db (b)"));
        assert_eq!(out.svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn metrics_file_named_after_directory() {
        assert_eq!(run_name(Path::new("runs/ddpo/metrics.jsonl")), "ddpo");
        assert_eq!(run_name(Path::new("x/other.jsonl")), "other");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(compare_files(&[]).is_err());
    }
}
