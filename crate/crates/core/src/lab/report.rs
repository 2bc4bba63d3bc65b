//! Read-only reporting over finished run records. Breadth tables put pool
//! sizes in columns; depth tables put gallery sizes in columns. Box plots
//! show the spread across reruns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::diagnose::{diagnose_cells, quantile_sorted, StabilityThresholds};
use super::run::{Cell, RunRecord, SweepKind};
use super::store::{write_result_rows, Manifest};
use crate::error::{Error, Result};

/// A small string table, written as CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// The cell in `row` under the column named `column`.
    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.header.iter().position(|h| h == column)?;
        self.rows.get(row)?.get(c).map(String::as_str)
    }
}

/// EER fraction as percentage points with two decimals.
pub fn pct(eer: f64) -> String {
    format!("{:.2}", eer * 100.0)
}

/// Per-(cell, G) EERs across reruns.
fn group(records: &[&RunRecord]) -> BTreeMap<(Cell, usize), Vec<f64>> {
    let mut out: BTreeMap<(Cell, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        for (&g, &eer) in &r.eer_by_g {
            out.entry((r.cell, g)).or_default().push(eer);
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean EER per pool size: one row per (samples, M, triplets, G), one column
/// per pool size.
pub fn breadth_table(records: &[&RunRecord]) -> Table {
    let groups = group(records);
    let breadths: BTreeSet<usize> = groups.keys().map(|(c, _)| c.breadth).collect();
    let mut header: Vec<String> = ["samples_per_subject", "M", "triplets", "G"]
        .map(String::from)
        .to_vec();
    header.extend(breadths.iter().map(usize::to_string));
    let mut rows: BTreeMap<(usize, usize, u64, usize), Vec<String>> = BTreeMap::new();
    for ((cell, g), eers) in &groups {
        let key = (cell.samples_per_subject, cell.seq_len, cell.triplets, *g);
        let row = rows
            .entry(key)
            .or_insert_with(|| vec![String::new(); breadths.len()]);
        let col = breadths
            .iter()
            .position(|&b| b == cell.breadth)
            .expect("collected");
        row[col] = pct(mean(eers));
    }
    Table {
        header,
        rows: rows
            .into_iter()
            .map(|((n, m, t, g), values)| {
                let mut row = vec![n.to_string(), m.to_string(), t.to_string(), g.to_string()];
                row.extend(values);
                row
            })
            .collect(),
    }
}

/// Mean EER per gallery size: one row per (breadth, M, samples, triplets),
/// one column per G.
pub fn depth_table(records: &[&RunRecord]) -> Table {
    let groups = group(records);
    let gs: BTreeSet<usize> = groups.keys().map(|(_, g)| *g).collect();
    let mut header: Vec<String> = ["breadth", "M", "samples_per_subject", "triplets"]
        .map(String::from)
        .to_vec();
    header.extend(gs.iter().map(|g| format!("G={g}")));
    let mut rows: BTreeMap<(usize, usize, usize, u64), Vec<String>> = BTreeMap::new();
    for ((cell, g), eers) in &groups {
        let key = (
            cell.breadth,
            cell.seq_len,
            cell.samples_per_subject,
            cell.triplets,
        );
        let row = rows
            .entry(key)
            .or_insert_with(|| vec![String::new(); gs.len()]);
        let col = gs.iter().position(|x| x == g).expect("collected");
        row[col] = pct(mean(eers));
    }
    Table {
        header,
        rows: rows
            .into_iter()
            .map(|((b, m, n, t), values)| {
                let mut row = vec![b.to_string(), m.to_string(), n.to_string(), t.to_string()];
                row.extend(values);
                row
            })
            .collect(),
    }
}

/// Rerun statistics per (sweep, cell, G), in percentage points.
pub fn summary_table(records: &[RunRecord]) -> Table {
    let header = [
        "sweep",
        "breadth",
        "samples_per_subject",
        "M",
        "triplets",
        "G",
        "reruns",
        "mean_eer",
        "median_eer",
        "q1_eer",
        "q3_eer",
        "min_eer",
        "max_eer",
    ]
    .map(String::from)
    .to_vec();
    let mut rows = Vec::new();
    for sweep in [SweepKind::Breadth, SweepKind::Depth, SweepKind::Single] {
        let subset: Vec<&RunRecord> = records.iter().filter(|r| r.sweep == sweep).collect();
        for ((cell, g), eers) in group(&subset) {
            let mut sorted = eers.clone();
            sorted.sort_by(f64::total_cmp);
            rows.push(vec![
                sweep.to_string(),
                cell.breadth.to_string(),
                cell.samples_per_subject.to_string(),
                cell.seq_len.to_string(),
                cell.triplets.to_string(),
                g.to_string(),
                eers.len().to_string(),
                pct(mean(&eers)),
                pct(quantile_sorted(&sorted, 0.5)),
                pct(quantile_sorted(&sorted, 0.25)),
                pct(quantile_sorted(&sorted, 0.75)),
                pct(sorted[0]),
                pct(sorted[sorted.len() - 1]),
            ]);
        }
    }
    Table { header, rows }
}

/// Diagnostic verdict per cell; cells with fewer than three gallery sizes
/// are listed with the reason instead.
pub fn stability_table(records: &[RunRecord], thresholds: StabilityThresholds) -> Table {
    let header = [
        "breadth",
        "samples_per_subject",
        "M",
        "triplets",
        "reruns",
        "increases",
        "violations",
        "max_increase",
        "max_iqr",
        "verdict",
    ]
    .map(String::from)
    .to_vec();
    let rows = diagnose_cells(records, thresholds)
        .into_iter()
        .map(|(cell, report)| {
            let mut row = vec![
                cell.breadth.to_string(),
                cell.samples_per_subject.to_string(),
                cell.seq_len.to_string(),
                cell.triplets.to_string(),
            ];
            match report {
                Ok(r) => row.extend([
                    r.reruns.to_string(),
                    r.increases.to_string(),
                    r.violations.to_string(),
                    format!("{:.2}", r.max_increase),
                    format!("{:.2}", r.max_iqr),
                    r.verdict.to_string(),
                ]),
                Err(e) => {
                    row.extend(std::iter::repeat_n(String::new(), 5));
                    row.push(format!("not diagnosed: {e}"));
                }
            }
            row
        })
        .collect();
    Table { header, rows }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One box per labelled group of EERs (percentage points): quartile box,
/// median line, min–max whiskers and the individual reruns as dots.
pub fn box_plot_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let (left, top, plot_h, slot) = (60.0, 40.0, 240.0, 70.0);
    let width = left + slot * groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 90.0;
    let max = groups
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0f64, f64::max);
    let y_max = if max > 0.0 { (max * 1.1).ceil() } else { 1.0 };
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    for i in 0..=4 {
        let v = y_max * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{yv:.1}" x2="{:.1}" y2="{yv:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left,
            width - 20.0,
            left - 6.0,
            y(v) + 4.0,
            yv = y(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">EER (%)</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (i, (label, values)) in groups.iter().enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let label_y = top + plot_h + 14.0;
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{label_y:.1}" transform="rotate(30 {cx:.1} {label_y:.1})">{}</text>"#,
            escape(label)
        );
        if values.is_empty() {
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| quantile_sorted(&sorted, p);
        let (lo, q1, med, q3, hi) = (
            sorted[0],
            q(0.25),
            q(0.5),
            q(0.75),
            sorted[sorted.len() - 1],
        );
        let half = slot * 0.3;
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(hi),
            y(lo)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(q3),
            2.0 * half,
            (y(q1) - y(q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ym:.1}" x2="{:.1}" y2="{ym:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            ym = y(med)
        );
        for v in &sorted {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.1}" cy="{:.1}" r="2" fill="#08519c"/>"##,
                cx + half + 6.0,
                y(*v)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes every report artifact into `out_dir` and returns their paths.
pub fn report(
    records: &[RunRecord],
    manifests: &[Manifest],
    out_dir: &Path,
    thresholds: StabilityThresholds,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Config("no run records to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let results = out_dir.join("results.csv");
    let file = fs::File::create(&results).map_err(|e| Error::io(&results, e))?;
    write_result_rows(file, records, true)?;
    written.push(results);

    let mut tables = vec![
        ("summary.csv", summary_table(records)),
        ("stability.csv", stability_table(records, thresholds)),
    ];
    for (sweep, name) in [
        (SweepKind::Breadth, "table_breadth.csv"),
        (SweepKind::Depth, "table_depth.csv"),
    ] {
        let subset: Vec<&RunRecord> = records.iter().filter(|r| r.sweep == sweep).collect();
        if !subset.is_empty() {
            let table = match sweep {
                SweepKind::Breadth => breadth_table(&subset),
                _ => depth_table(&subset),
            };
            tables.push((name, table));
        }
    }
    for (name, table) in tables {
        let path = out_dir.join(name);
        table.write_csv(&path)?;
        written.push(path);
    }

    for sweep in [SweepKind::Breadth, SweepKind::Depth, SweepKind::Single] {
        let subset: Vec<&RunRecord> = records.iter().filter(|r| r.sweep == sweep).collect();
        let groups = group(&subset);
        let gs: BTreeSet<usize> = groups.keys().map(|(_, g)| *g).collect();
        for g in gs {
            let boxes: Vec<(String, Vec<f64>)> = groups
                .iter()
                .filter(|((_, gg), _)| *gg == g)
                .map(|((cell, _), eers)| {
                    (cell.to_string(), eers.iter().map(|e| e * 100.0).collect())
                })
                .collect();
            let path = out_dir.join(format!("boxplot-{sweep}-g{g}.svg"));
            let svg = box_plot_svg(&format!("{sweep} sweep, G={g}: EER across reruns"), &boxes);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }

    for manifest in manifests {
        let path = out_dir.join(format!("manifest-{}.json", manifest.sweep));
        fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
