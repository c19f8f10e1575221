//! Seed-averaged summaries and SVG line plots of metric vs sparsity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::records::RunRecord;
use crate::error::{Error, Result};

/// Mean and population standard deviation of one
/// `(metric, dataset, method, sparsity)` cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub metric: String,
    pub dataset: String,
    pub method: String,
    pub sparsity: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Groups records by cell and averages over seeds, summing in ascending
/// seed order. Cells come out sorted by metric, dataset, method, sparsity.
pub fn aggregate(records: &[RunRecord]) -> Vec<Summary> {
    let mut cells: BTreeMap<(&str, &str, &str, u64), Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        // Sparsities are non-negative, so their bit patterns sort like the values.
        cells.entry((&r.metric, &r.dataset, &r.method, r.sparsity.to_bits())).or_default().push((r.seed, r.value));
    }
    cells
        .into_iter()
        .map(|((metric, dataset, method, s), mut v)| {
            v.sort_by_key(|e| e.0);
            let n = v.len() as f64;
            let mean = v.iter().map(|e| e.1).sum::<f64>() / n;
            let var = v.iter().map(|e| (e.1 - mean).powi(2)).sum::<f64>() / n;
            Summary {
                metric: metric.to_string(),
                dataset: dataset.to_string(),
                method: method.to_string(),
                sparsity: f64::from_bits(s),
                mean,
                std: var.sqrt(),
                seeds: v.len(),
            }
        })
        .collect()
}

/// Axis interval covering `values` with a 5% margin on each side. A single
/// distinct value gets a margin of 5% of its magnitude (at least 0.05).
pub fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.05 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG line plot of `mean` against sparsity, one line per method, with a
/// legend. Output depends only on the input.
pub fn svg_plot(title: &str, cells: &[&Summary]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let xs: Vec<f64> = cells.iter().map(|c| c.sparsity).collect();
    let ys: Vec<f64> = cells.iter().map(|c| c.mean).collect();
    let (x0, x1) = axis_range(&xs);
    let (y0, y1) = axis_range(&ys);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for c in cells {
        series.entry(&c.method).or_default().push((c.sparsity, c.mean));
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, (w - right + left) / 2.0, escape(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<path d="M{ax0:.2} {ay1:.2} L{ax0:.2} {ay0:.2} L{ax1:.2} {ay0:.2}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{xv:.3}</text>"#, px(xv), ay0 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{yv:.3}</text>"#, ax0 - 6.0, py(yv) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">sparsity</text>"#, (ax0 + ax1) / 2.0, h - 12.0);
    for (k, (method, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[k % PALETTE.len()];
        if pts.len() > 1 {
            let d: Vec<String> = pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { "L" }, px(x), py(y)))
                .collect();
            let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.join(" "));
        }
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="12" height="3" fill="{color}"/>"#, w - right + 15.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11">{}</text>"#, w - right + 32.0, escape(method));
    }
    s.push_str("</svg>\n");
    s
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn summary_csv(cells: &[&Summary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(c).map_err(|e| Error::Data(format!("summary csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("summary csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `summary_<metric>.csv` for every metric and, for each relative
/// metric and dataset, `plot_<metric>_<dataset>.svg`. Returns the files
/// written, in a fixed order.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::arg("nothing to report"));
    }
    std::fs::create_dir_all(out_dir)?;
    let summaries = aggregate(records);
    let mut by_metric: BTreeMap<&str, Vec<&Summary>> = BTreeMap::new();
    for c in &summaries {
        by_metric.entry(&c.metric).or_default().push(c);
    }
    let mut written = Vec::new();
    for (metric, cells) in &by_metric {
        let path = out_dir.join(format!("summary_{}.csv", file_safe(metric)));
        std::fs::write(&path, summary_csv(cells)?)?;
        written.push(path);
    }
    let plotted: Vec<&str> = if by_metric.keys().any(|m| m.starts_with("rel_")) {
        by_metric.keys().filter(|m| m.starts_with("rel_")).cloned().collect()
    } else {
        by_metric.keys().cloned().collect()
    };
    for metric in plotted {
        let mut by_dataset: BTreeMap<&str, Vec<&Summary>> = BTreeMap::new();
        for c in &by_metric[metric] {
            by_dataset.entry(&c.dataset).or_default().push(c);
        }
        for (dataset, cells) in by_dataset {
            let path = out_dir.join(format!("plot_{}_{}.svg", file_safe(metric), file_safe(dataset)));
            std::fs::write(&path, svg_plot(&format!("{metric} on {dataset}"), &cells))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, s: f64, value: f64) -> RunRecord {
        RunRecord {
            run_id: format!("{method}@{s}"),
            seed,
            method: method.into(),
            sparsity: s,
            metric: "rel_accuracy".into(),
            dataset: "clean".into(),
            value,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn means_follow_seed_order() {
        let rs = vec![rec("snip", 2, 0.5, 0.3), rec("snip", 0, 0.5, 0.1), rec("snip", 1, 0.5, 0.2), rec("dense", 0, 0.0, 1.0)];
        let a = aggregate(&rs);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].method, "dense");
        assert_eq!(a[1].mean, (0.1 + 0.2 + 0.3) / 3.0);
        assert_eq!(a[1].seeds, 3);
    }

    #[test]
    fn axis_margins() {
        let (lo, hi) = axis_range(&[0.5, 0.9]);
        assert!((lo - 0.48).abs() < 1e-12 && (hi - 0.92).abs() < 1e-12);
        let (lo, hi) = axis_range(&[2.0]);
        assert!(lo < 2.0 && hi > 2.0);
    }

    #[test]
    fn single_record_plots_one_point() {
        let r = rec("snip", 0, 0.9, 0.97);
        let cell = &aggregate(&[r])[0];
        let svg = svg_plot("t & u", &[cell]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains("t &amp; u"));
    }

    #[test]
    fn report_is_deterministic() {
        let rs = vec![rec("snip", 0, 0.5, 0.9), rec("snip", 0, 0.9, 0.8), rec("dense", 0, 0.0, 1.0)];
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = report(&rs, a.path()).unwrap();
        let fb = report(&rs, b.path()).unwrap();
        assert_eq!(fa.len(), 2);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        assert!(report(&[], a.path()).is_err());
    }
}
