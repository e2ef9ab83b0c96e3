//! CSV and markdown tables, stage curves and the 2-D PCA scatter.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use gil_core::data::ClassId;
use gil_core::eval::{AblationReport, Aggregate, RunResult};
use gil_core::pipeline::StageLog;

use crate::error::{CliError, Result};
use crate::formats;

pub const STD_FOOTER: &str = "± is the population standard deviation over seeds (divide by N).";

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// One row per seed, one column per metric.
pub fn results_csv(results: &[RunResult], path: &Path) -> Result<()> {
    let names: Vec<&str> = results.first().map(|r| r.metrics().iter().map(|m| m.0).collect()).unwrap_or_default();
    let mut header = strings(&["seed", "mode"]);
    header.extend(strings(&names));
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut row = vec![r.seed.to_string(), format!("{:?}", r.mode).to_lowercase()];
            row.extend(r.metrics().iter().map(|m| m.1.to_string()));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

pub fn aggregate_csv(agg: &Aggregate, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> =
        agg.metrics.iter().map(|m| vec![m.name.clone(), m.mean.to_string(), m.std.to_string(), agg.runs.to_string()]).collect();
    write_rows(path, &strings(&["metric", "mean", "std", "runs"]), &rows)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

pub fn aggregate_markdown(title: &str, agg: &Aggregate) -> String {
    let mut s = format!("# {title}\n\n| metric | mean (%) | std (%) |\n|---|---:|---:|\n");
    for m in &agg.metrics {
        let _ = writeln!(s, "| {} | {} | {} |", m.name, pct(m.mean), pct(m.std));
    }
    let _ = write!(s, "\n{} runs. {STD_FOOTER}\n", agg.runs);
    s
}

/// Stage, completion in percent and unseen accuracy, plus the bookkeeping
/// of each stage.
pub fn stages_csv(log: &[StageLog], path: &Path) -> Result<()> {
    let header = strings(&[
        "stage",
        "completion_percent",
        "accuracy",
        "buffer_size",
        "replay_samples",
        "real_samples",
        "generator_checksum",
    ]);
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|l| {
            vec![
                l.stage.to_string(),
                (100.0 * l.completion).to_string(),
                l.unseen_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                l.buffer_size.to_string(),
                l.replay_samples.to_string(),
                l.real_samples.to_string(),
                format!("{:016x}", l.generator_checksum),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// Seed-mean stage curve of an aggregate.
pub fn curve_csv(agg: &Aggregate, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = agg
        .curve
        .iter()
        .map(|c| vec![c.stage.to_string(), (100.0 * c.completion).to_string(), c.mean.to_string(), c.std.to_string()])
        .collect();
    write_rows(path, &strings(&["stage", "completion_percent", "accuracy", "std"]), &rows)
}

fn metric_cell(agg: &Aggregate, name: &str) -> (String, String) {
    agg.metric(name).map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()))
}

pub fn ablation_csv(report: &AblationReport, path: &Path) -> Result<()> {
    let names: Vec<String> =
        report.rows.first().map(|r| r.aggregate.metrics.iter().map(|m| m.name.clone()).collect()).unwrap_or_default();
    let mut header = strings(&["ablation", "value"]);
    for n in &names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_std"));
    }
    header.push("runs".into());
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![report.name.as_str().to_string(), r.label.clone()];
            for n in &names {
                let (m, s) = metric_cell(&r.aggregate, n);
                row.push(m);
                row.push(s);
            }
            row.push(r.aggregate.runs.to_string());
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

pub fn ablation_markdown(report: &AblationReport) -> String {
    let names: Vec<String> =
        report.rows.first().map(|r| r.aggregate.metrics.iter().map(|m| m.name.clone()).collect()).unwrap_or_default();
    let mut s = format!("# Ablation: {}\n\n| {} |", report.name.as_str(), report.name.as_str());
    for n in &names {
        let _ = write!(s, " {n} (%) |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(names.len()));
    s.push('\n');
    for r in &report.rows {
        let _ = write!(s, "| {} |", r.label);
        for n in &names {
            match r.aggregate.metric(n) {
                Some(m) => {
                    let _ = write!(s, " {} ± {} |", pct(m.mean), pct(m.std));
                }
                None => s.push_str(" |"),
            }
        }
        s.push('\n');
    }
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = write!(s, "\nSeeds {} (paired across rows). {STD_FOOTER}\n", seeds.join(", "));
    s
}

/// A point of the scatter export.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub instance_id: u32,
    pub class_id: ClassId,
    pub pc1: f64,
    pub pc2: f64,
    pub synthetic: bool,
}

/// Project rows onto their top two principal components.
///
/// Each component's sign is fixed so its largest-magnitude loading is
/// positive, which makes the output independent of the SVD's sign choice.
pub fn pca2(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![[0.0; 2]; n];
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    // Eigenvectors of the d x d scatter matrix.
    let cov = m.transpose() * &m;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    (0..n)
        .map(|i| {
            let row = m.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&comps[0]), dot(&comps[1])]
        })
        .collect()
}

/// Columns `instance_id,class_id,pc1,pc2,source` with source `real` or
/// `synthetic`.
pub fn scatter_csv(points: &[ScatterPoint], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.instance_id.to_string(),
                p.class_id.to_string(),
                p.pc1.to_string(),
                p.pc2.to_string(),
                if p.synthetic { "synthetic" } else { "real" }.to_string(),
            ]
        })
        .collect();
    write_rows(path, &strings(&["instance_id", "class_id", "pc1", "pc2", "source"]), &rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    formats::write(path, text.as_bytes())
}
