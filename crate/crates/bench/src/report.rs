//! Samples, CSV files and mean ± stddev plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::BenchError;

pub const CSV_HEADER: &str = "metric,backend,iaas_count,rep,value_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Irdd,
    Tad,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Irdd => "irdd",
            Metric::Tad => "tad",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Irdd => "Idle robot discovery delay",
            Metric::Tad => "Task assignment delay",
        }
    }
}

/// One timed observation. `scenario` names the run it came from (for TAD,
/// the receiving node) and is not part of the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub metric: Metric,
    #[serde(skip)]
    pub scenario: String,
    pub backend: String,
    pub iaas_count: usize,
    pub rep: usize,
    pub value_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
}

/// Sample mean and (n-1) standard deviation; `None` when empty.
pub fn stats(values: &[f64]) -> Option<Stats> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Some(Stats {
        n,
        mean,
        stddev: var.sqrt(),
    })
}

/// metric -> backend -> iaas_count -> stats.
pub type Summary = BTreeMap<Metric, BTreeMap<String, BTreeMap<usize, Stats>>>;

pub fn summarize(samples: &[MetricSample]) -> Summary {
    let mut groups: BTreeMap<Metric, BTreeMap<String, BTreeMap<usize, Vec<f64>>>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.metric)
            .or_default()
            .entry(s.backend.clone())
            .or_default()
            .entry(s.iaas_count)
            .or_default()
            .push(s.value_ms);
    }
    groups
        .into_iter()
        .map(|(m, backends)| {
            let b = backends
                .into_iter()
                .map(|(name, counts)| {
                    let c = counts
                        .into_iter()
                        .filter_map(|(k, v)| stats(&v).map(|s| (k, s)))
                        .collect();
                    (name, c)
                })
                .collect();
            (m, b)
        })
        .collect()
}

/// Stats grouped by `scenario` within one metric and backend.
pub fn by_scenario(samples: &[MetricSample], metric: Metric, backend: &str) -> BTreeMap<String, Stats> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.metric == metric && s.backend == backend) {
        groups.entry(s.scenario.clone()).or_default().push(s.value_ms);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| stats(&v).map(|s| (k, s)))
        .collect()
}

pub fn write_csv(path: &Path, samples: &[MetricSample]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Csv(path.display().to_string(), e))?;
    for s in samples {
        w.serialize(s).map_err(|e| BenchError::Csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| BenchError::Io(path.display().to_string(), e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricSample>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| BenchError::Csv(path.display().to_string(), e))?;
    let header = r
        .headers()
        .map_err(|e| BenchError::Csv(path.display().to_string(), e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(BenchError::Usage(format!("{}: header `{header}` is not `{CSV_HEADER}`", path.display())));
    }
    r.deserialize()
        .collect::<Result<Vec<MetricSample>, _>>()
        .map_err(|e| BenchError::Csv(path.display().to_string(), e))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// SVG line plot of mean ± stddev against iaas_count, one line per backend.
/// Depends only on the CSV columns, so re-ingested samples redraw the same
/// bytes.
pub fn render_svg(metric: Metric, by_backend: &BTreeMap<String, BTreeMap<usize, Stats>>) -> String {
    let xs: Vec<usize> = {
        let mut v: Vec<usize> = by_backend.values().flat_map(|c| c.keys().copied()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let y_max = by_backend
        .values()
        .flat_map(|c| c.values().map(|s| s.mean + s.stddev))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let (x_lo, x_hi) = (
        *xs.first().unwrap_or(&0) as f64,
        *xs.last().unwrap_or(&1) as f64,
    );
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: usize| {
        if x_hi > x_lo {
            MARGIN + (x as f64 - x_lo) / span * (W - 2.0 * MARGIN)
        } else {
            W / 2.0
        }
    };
    let py = |y: f64| H - MARGIN - y / y_max * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{} (mean ± stddev)</text>"#,
        W / 2.0,
        metric.title()
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for &x in &xs {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py(v) + 4.0,
            fmt_num(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">IaaS count</text>"#,
        W / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{} (ms)</text>"#,
        H / 2.0,
        H / 2.0,
        metric.as_str().to_uppercase()
    );
    for (k, (backend, counts)) in by_backend.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = counts
            .iter()
            .map(|(&x, s)| format!("{:.1},{:.1}", px(x), py(s.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        );
        for (&x, s) in counts {
            let (cx, lo, hi) = (px(x), py((s.mean - s.stddev).max(0.0)), py(s.mean + s.stddev));
            let _ = writeln!(
                svg,
                r#"<path d="M{cx:.1} {lo:.1} L{cx:.1} {hi:.1} M{:.1} {lo:.1} L{:.1} {lo:.1} M{:.1} {hi:.1} L{:.1} {hi:.1}" stroke="{color}"/>"#,
                cx - 4.0,
                cx + 4.0,
                cx - 4.0,
                cx + 4.0
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                py(s.mean)
            );
        }
        let ly = y1 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{}" y="{:.1}">{backend}</text>"#,
            x1 - 110.0,
            ly - 4.0,
            x1 - 92.0,
            ly
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `samples.csv` plus one `<metric>.svg` per metric present.
pub fn emit_report(samples: &[MetricSample], out_dir: &Path) -> Result<ReportFiles, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Usage("no samples to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| BenchError::Io(out_dir.display().to_string(), e))?;
    let csv = out_dir.join("samples.csv");
    write_csv(&csv, samples)?;
    let mut plots = Vec::new();
    for (metric, by_backend) in summarize(samples) {
        let path = out_dir.join(format!("{}.svg", metric.as_str()));
        fs::write(&path, render_svg(metric, &by_backend)).map_err(|e| BenchError::Io(path.display().to_string(), e))?;
        plots.push(path);
    }
    Ok(ReportFiles { csv, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(metric: Metric, backend: &str, n: usize, rep: usize, v: f64) -> MetricSample {
        MetricSample {
            metric,
            scenario: String::new(),
            backend: backend.into(),
            iaas_count: n,
            rep,
            value_ms: v,
        }
    }

    #[test]
    fn stats_match_hand_computation() {
        let s = stats(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(stats(&[3.0]).unwrap().stddev, 0.0);
        assert!(stats(&[]).is_none());
    }

    #[test]
    fn two_backends_by_three_counts_by_thirty_reps() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        for backend in ["presence", "overlay"] {
            for n in [2, 4, 8] {
                for rep in 0..30 {
                    samples.push(sample(Metric::Irdd, backend, n, rep, n as f64 + rep as f64 / 10.0));
                }
            }
        }
        let files = emit_report(&samples, dir.path()).unwrap();
        let text = fs::read_to_string(&files.csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.count(), 180);
        assert_eq!(files.plots, vec![dir.path().join("irdd.svg")]);
    }

    #[test]
    fn empty_samples_are_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(BenchError::Usage(_))));
    }

    #[test]
    fn foreign_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_csv(&p), Err(BenchError::Usage(_))));
    }

    #[test]
    fn single_point_plot_is_well_formed() {
        let s = summarize(&[sample(Metric::Tad, "presence", 4, 0, 5.0)]);
        let svg = render_svg(Metric::Tad, &s[&Metric::Tad]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(!svg.contains("NaN"));
    }
}
