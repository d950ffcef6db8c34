use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EvalRecord;
use crate::chemgraph::TaskType;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: String,
    pub task_type: TaskType,
    pub k: usize,
    pub method: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub task: String,
    pub k: usize,
    pub best: String,
    pub second: String,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRank {
    /// `all`, `in_distribution` or `out_of_distribution`.
    pub group: String,
    pub k: usize,
    pub method: String,
    pub rank: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<String>,
    pub ks: Vec<usize>,
    pub significance_test: String,
    pub alpha: f64,
    pub cells: Vec<CellSummary>,
    pub significance: Vec<Significance>,
    pub average_ranks: Vec<AverageRank>,
}

/// Ranks 1..n with 1 for the largest value; ties share the mean of their
/// positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided Welch t-test p-value.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    let ((ma, sa), (mb, sb)) = (mean_sd(a), mean_sd(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sa * sa / na, sb * sb / nb);
    let se2 = va + vb;
    if se2 == 0.0 || a.len() < 2 || b.len() < 2 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => 2.0 * (1.0 - dist.cdf(t.abs())),
        Err(_) => 1.0,
    }
}

/// Per-cell means and ranks, best-vs-second significance, and average ranks
/// per k overall and within each distribution group.
pub fn aggregate(records: &[EvalRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::data("no records to aggregate"));
    }
    let mut methods: Vec<String> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    // (task, k) -> method -> scores
    let mut groups: BTreeMap<(String, usize), (TaskType, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for r in records {
        if !(0.0..=1.0).contains(&r.auprc) {
            return Err(Error::data(format!("AUPRC {} out of range", r.auprc)));
        }
        groups
            .entry((r.task.clone(), r.k))
            .or_insert_with(|| (r.task_type, BTreeMap::new()))
            .1
            .entry(r.method.clone())
            .or_default()
            .push(r.auprc);
    }
    let mut missing = Vec::new();
    for ((task, k), (_, by_method)) in &groups {
        let expected = by_method.values().map(Vec::len).max().unwrap_or(0);
        for m in &methods {
            let have = by_method.get(m).map_or(0, Vec::len);
            if have != expected {
                missing.push(format!("{m}/{task}/k={k} has {have} of {expected}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::data(format!("incomplete record matrix: {}", missing.join(", "))));
    }

    let mut report = Report {
        methods: methods.clone(),
        ks: Vec::new(),
        significance_test: "welch_t".into(),
        alpha: 0.05,
        cells: Vec::new(),
        significance: Vec::new(),
        average_ranks: Vec::new(),
    };
    // (group, k) -> method -> ranks
    let mut rank_sums: BTreeMap<(String, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for ((task, k), (task_type, by_method)) in &groups {
        if !report.ks.contains(k) {
            report.ks.push(*k);
        }
        let stats: Vec<(f64, f64, usize)> = methods
            .iter()
            .map(|m| {
                let xs = &by_method[m];
                let (mean, sd) = mean_sd(xs);
                (mean, sd, xs.len())
            })
            .collect();
        let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let ranks = average_ranks(&means);
        for (i, m) in methods.iter().enumerate() {
            report.cells.push(CellSummary {
                task: task.clone(),
                task_type: *task_type,
                k: *k,
                method: m.clone(),
                mean: stats[i].0,
                sd: stats[i].1,
                n: stats[i].2,
                rank: ranks[i],
            });
        }
        if methods.len() >= 2 {
            let mut order: Vec<usize> = (0..methods.len()).collect();
            order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
            let (best, second) = (order[0], order[1]);
            let p = welch_p_value(&by_method[&methods[best]], &by_method[&methods[second]]);
            report.significance.push(Significance {
                task: task.clone(),
                k: *k,
                best: methods[best].clone(),
                second: methods[second].clone(),
                p_value: p,
                significant: p < report.alpha,
            });
        }
        let group = if task_type.in_distribution() {
            "in_distribution"
        } else {
            "out_of_distribution"
        };
        for g in ["all", group] {
            rank_sums
                .entry((g.to_string(), *k))
                .or_insert_with(|| vec![Vec::new(); methods.len()])
                .iter_mut()
                .zip(&ranks)
                .for_each(|(acc, &r)| acc.push(r));
        }
    }
    report.ks.sort_unstable();
    for ((group, k), per_method) in rank_sums {
        for (m, ranks) in methods.iter().zip(per_method) {
            report.average_ranks.push(AverageRank {
                group: group.clone(),
                k,
                method: m.clone(),
                rank: ranks.iter().sum::<f64>() / ranks.len() as f64,
                tasks: ranks.len(),
            });
        }
    }
    Ok(report)
}

pub fn write_report_json<W: Write>(writer: W, report: &Report) -> Result<()> {
    serde_json::to_writer_pretty(writer, report)?;
    Ok(())
}

pub fn write_rank_csv<W: Write>(writer: W, report: &Report) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in &report.average_ranks {
        w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line chart of average rank against k, one panel per distribution group
/// present, lower rank drawn higher.
pub fn rank_chart_svg(report: &Report) -> String {
    let groups: Vec<&str> = ["in_distribution", "out_of_distribution"]
        .into_iter()
        .filter(|g| report.average_ranks.iter().any(|r| r.group == *g))
        .collect();
    let (pw, ph, margin) = (360.0, 260.0, 50.0);
    let width = groups.len().max(1) as f64 * (pw + margin) + margin + 140.0;
    let height = ph + 2.0 * margin;
    let m = report.methods.len().max(1) as f64;
    let ks = &report.ks;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (gi, group) in groups.iter().enumerate() {
        let x0 = margin + gi as f64 * (pw + margin);
        let y0 = margin;
        let x_at = |i: usize| {
            if ks.len() <= 1 {
                x0 + pw / 2.0
            } else {
                x0 + pw * i as f64 / (ks.len() - 1) as f64
            }
        };
        let y_at = |rank: f64| {
            if m <= 1.0 {
                y0 + ph / 2.0
            } else {
                y0 + ph * (rank - 1.0) / (m - 1.0)
            }
        };
        let title = group.replace('_', " ");
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{title}</text>"#, x0 + pw / 2.0, y0 - 20.0);
        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##
        );
        for (i, k) in ks.iter().enumerate() {
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{k}</text>"#, x_at(i), y0 + ph + 18.0);
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">k</text>"#, x0 + pw / 2.0, y0 + ph + 36.0);
        for r in 1..=report.methods.len() {
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{r}</text>"#, x0 - 6.0, y_at(r as f64) + 4.0);
        }
        for (mi, method) in report.methods.iter().enumerate() {
            let color = PALETTE[mi % PALETTE.len()];
            let points: Vec<(f64, f64)> = ks
                .iter()
                .enumerate()
                .filter_map(|(i, k)| {
                    report
                        .average_ranks
                        .iter()
                        .find(|r| r.group == *group && r.k == *k && &r.method == method)
                        .map(|r| (x_at(i), y_at(r.rank)))
                })
                .collect();
            let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
            for (x, y) in &points {
                let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            }
        }
    }
    let lx = margin + groups.len().max(1) as f64 * (pw + margin);
    for (mi, method) in report.methods.iter().enumerate() {
        let y = margin + 16.0 * mi as f64;
        let color = PALETTE[mi % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            y + 4.0,
            escape(method)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
