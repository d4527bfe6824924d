//! `report`: gathers trace and histogram CSVs under a run directory and
//! writes the comparison table, per-frame curves and depth histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adaptive_depth::pipeline::{Metrics, Trace};
use adaptive_depth::Error;

use crate::plot::{bar_chart, line_chart, Series};

type Result<T> = std::result::Result<T, Error>;

/// Row order of the comparison table; unknown methods follow alphabetically.
pub const METHOD_ORDER: [&str; 6] = ["agnostic", "scanline", "fixed", "implicit", "prednet", "lower_bound"];

pub const METHODS_HEADER: &str = "method,rmse,mae,frames,mean_soft_count,mean_hard_count";
pub const PER_FRAME_HEADER: &str = "method,t,rmse,sequences";
pub const HISTOGRAM_HEADER: &str = "method,bin_lo,bin_hi,fraction";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn files_with_prefix(dir: &Path, prefix: &str, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            files_with_prefix(&p, prefix, found)?;
        } else if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
            if name.starts_with(prefix) && name.ends_with(".csv") {
                found.push(p);
            }
        }
    }
    Ok(())
}

/// Method name from `<prefix><method>.csv`; repeated names get the parent
/// directory appended.
fn method_key<T>(path: &Path, prefix: &str, taken: &BTreeMap<String, T>) -> String {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let method = name.trim_start_matches(prefix).to_string();
    if !taken.contains_key(&method) {
        return method;
    }
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    let mut key = format!("{method}@{parent}");
    let mut n = 2;
    while taken.contains_key(&key) {
        key = format!("{method}@{parent}{n}");
        n += 1;
    }
    key
}

fn rank(method: &str) -> (usize, String) {
    let base = method.split('@').next().unwrap_or(method);
    let pos = METHOD_ORDER.iter().position(|m| *m == base).unwrap_or(METHOD_ORDER.len());
    (pos, method.to_string())
}

pub fn sorted_methods<'a>(names: impl Iterator<Item = &'a String>) -> Vec<&'a String> {
    let mut v: Vec<&String> = names.collect();
    v.sort_by_key(|m| rank(m));
    v
}

fn read_histogram(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("bin_lo,bin_hi,fraction") {
        return Err(Error::Format(format!("{}: bad histogram header", path.display())));
    }
    let bad = || Error::Format(format!("{}: bad histogram row", path.display()));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
            match f[..] {
                [a, b, c] => Ok((a, b, c)),
                _ => Err(bad()),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// Summary for the caller; everything else lands in files under `out`.
#[derive(Debug)]
pub struct ReportSummary {
    pub methods: Vec<(String, Metrics)>,
}

pub fn report(run_dir: &Path, out: &Path, from_frame: usize) -> Result<ReportSummary> {
    if !run_dir.is_dir() {
        return Err(Error::Data(format!("run directory {} does not exist", run_dir.display())));
    }
    let mut trace_files = Vec::new();
    files_with_prefix(run_dir, "trace_", &mut trace_files)?;
    if trace_files.is_empty() {
        return Err(Error::Data(format!("no trace_*.csv under {}", run_dir.display())));
    }
    let mut traces: BTreeMap<String, Trace> = BTreeMap::new();
    for p in &trace_files {
        let key = method_key(p, "trace_", &traces);
        traces.insert(key, Trace::read_csv(p)?);
    }
    let mut hist_files = Vec::new();
    files_with_prefix(run_dir, "hist_", &mut hist_files)?;
    let mut hists: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for p in &hist_files {
        let key = method_key(p, "hist_", &hists);
        hists.insert(key, read_histogram(p)?);
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    // comparison table
    let mut csv = format!("{METHODS_HEADER}\n");
    let mut md = String::from("| method | RMSE | MAE | frames | soft count | hard count |\n|---|---|---|---|---|---|\n");
    let mut methods = Vec::new();
    for name in sorted_methods(traces.keys()) {
        let m = match traces[name].metrics(from_frame) {
            Ok(m) => m,
            Err(Error::UndefinedMetric(_)) => {
                log::warn!("{name}: no frames with t >= {from_frame}; left out of the table");
                continue;
            }
            Err(e) => return Err(e),
        };
        let soft = m.mean_soft_count.map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{name},{},{},{},{soft},{}", m.rmse, m.mae, m.frames, m.mean_hard_count).unwrap();
        writeln!(
            md,
            "| {name} | {:.4} | {:.4} | {} | {} | {:.1} |",
            m.rmse,
            m.mae,
            m.frames,
            fmt_opt(m.mean_soft_count),
            m.mean_hard_count
        )
        .unwrap();
        methods.push((name.clone(), m));
    }
    write(out, "methods.csv", &csv)?;
    write(out, "methods.md", &md)?;

    // per-frame curves
    let mut csv = format!("{PER_FRAME_HEADER}\n");
    let mut curves = Vec::new();
    for name in sorted_methods(traces.keys()) {
        let pts = traces[name].per_frame_rmse();
        for &(t, rmse, n) in &pts {
            writeln!(csv, "{name},{t},{rmse},{n}").unwrap();
        }
        curves.push(pts.iter().map(|&(t, r, _)| (t as f64, r)).collect::<Vec<_>>());
    }
    write(out, "per_frame_rmse.csv", &csv)?;
    let series: Vec<Series> = curves.iter().map(|p| Series { points: p }).collect();
    line_chart(&out.join("per_frame_rmse.png"), &series)?;

    // sampled-depth histograms
    let mut csv = format!("{HISTOGRAM_HEADER}\n");
    let mut groups = Vec::new();
    for name in sorted_methods(hists.keys()) {
        for &(lo, hi, f) in &hists[name] {
            writeln!(csv, "{name},{lo},{hi},{f}").unwrap();
        }
        groups.push(hists[name].iter().map(|h| h.2).collect::<Vec<_>>());
    }
    write(out, "depth_histogram.csv", &csv)?;
    bar_chart(&out.join("depth_histogram.png"), &groups)?;

    Ok(ReportSummary { methods })
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptive_depth::pipeline::{Branch, FrameRecord};

    fn trace(rmse: f64, frames: usize) -> Trace {
        Trace {
            records: (0..frames)
                .map(|t| FrameRecord {
                    sequence_id: "s".into(),
                    t,
                    branch: Branch::Random,
                    soft_count: None,
                    hard_count: 10,
                    rmse,
                    mae: rmse / 2.0,
                })
                .collect(),
            sampled_depths: vec![],
        }
    }

    #[test]
    fn table_follows_method_order() {
        let names: Vec<String> = ["mix_match", "lower_bound", "agnostic", "prednet", "fixed", "implicit"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let order: Vec<&str> = sorted_methods(names.iter()).iter().map(|s| s.as_str()).collect();
        assert_eq!(order, ["agnostic", "fixed", "implicit", "prednet", "lower_bound", "mix_match"]);
    }

    #[test]
    fn constant_trace_gives_flat_curve() {
        let run = tempfile::tempdir().unwrap();
        trace(2.5, 6).write_csv(run.path().join("trace_agnostic.csv")).unwrap();
        let out = tempfile::tempdir().unwrap();
        report(run.path(), out.path(), 0).unwrap();
        let text = std::fs::read_to_string(out.path().join("per_frame_rmse.csv")).unwrap();
        let vals: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert_eq!(vals.len(), 6);
        assert!(vals.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn empty_run_dir_is_a_data_error() {
        let run = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(matches!(report(run.path(), out.path(), 0), Err(Error::Data(_))));
    }

    #[test]
    fn from_frame_filters_the_table() {
        let run = tempfile::tempdir().unwrap();
        let mut t = trace(1.0, 4);
        t.records[0].rmse = 100.0;
        t.write_csv(run.path().join("trace_prednet.csv")).unwrap();
        let out = tempfile::tempdir().unwrap();
        let s = report(run.path(), out.path(), 1).unwrap();
        assert_eq!(s.methods[0].1.rmse, 1.0);
        assert_eq!(s.methods[0].1.frames, 3);
    }
}
