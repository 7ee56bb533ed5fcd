//! CSV table and log-log SVG chart for scaling runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ComplexityModel, CostArgs, ScalingRun};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = [
    "kernel",
    "T",
    "median_seconds",
    "est_peak_bytes",
    "slope",
    "r2",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub kernel: String,
    #[serde(rename = "T")]
    pub tokens: usize,
    pub median_seconds: f64,
    pub est_peak_bytes: usize,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
}

pub fn csv_rows(runs: &[ScalingRun]) -> Vec<CsvRow> {
    runs.iter()
        .flat_map(|r| {
            (0..r.sizes.len()).map(move |i| CsvRow {
                kernel: r.kernel.clone(),
                tokens: r.sizes[i],
                median_seconds: r.median_seconds[i],
                est_peak_bytes: r.peak_bytes[i],
                slope: r.fit.map(|f| f.slope),
                r2: r.fit.map(|f| f.r2),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let record = e.position().map(|p| p.record() as usize);
    Error::format(path, record, e.to_string())
}

pub fn write_csv(runs: &[ScalingRun], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in csv_rows(runs) {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One polyline per measured kernel; each complexity model is a dashed path
/// anchored at the fastest measurement of the smallest size.
pub fn render_svg(runs: &[ScalingRun], models: &[ComplexityModel], args: &CostArgs) -> String {
    let sizes: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.sizes.iter().map(|&t| t as f64))
        .collect();
    let times: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.median_seconds.iter().copied())
        .collect();
    let (x_lo, x_hi) = bounds(&sizes);
    let anchor_t = x_lo;
    let anchor_y = runs
        .iter()
        .filter_map(|r| {
            r.sizes
                .first()
                .filter(|&&t| t as f64 == anchor_t)
                .map(|_| r.median_seconds[0])
        })
        .fold(f64::INFINITY, f64::min);
    let at = |m: &ComplexityModel, t: f64| {
        let a = CostArgs {
            tokens: t,
            height: t.sqrt() * args.patch,
            ..*args
        };
        m.time(&a)
    };
    let curves: Vec<Vec<(f64, f64)>> = models
        .iter()
        .map(|m| {
            let base = at(m, anchor_t);
            let mut pts = Vec::new();
            let steps = 32;
            for i in 0..=steps {
                let t = x_lo * (x_hi / x_lo).powf(i as f64 / steps as f64);
                pts.push((t, anchor_y * at(m, t) / base));
            }
            pts
        })
        .collect();
    let all_y: Vec<f64> = times
        .iter()
        .copied()
        .chain(curves.iter().flatten().map(|p| p.1))
        .filter(|y| y.is_finite() && *y > 0.0)
        .collect();
    let (y_lo, y_hi) = bounds(&all_y);
    let px =
        |t: f64| MARGIN + (t.log10() - x_lo.log10()) / span(x_lo, x_hi) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| {
        HEIGHT - MARGIN - (y.log10() - y_lo.log10()) / span(y_lo, y_hi) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r##"<g stroke="#333" fill="none"><line x1="{m}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}"/></g>"##,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">sequence length T (log)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {})">median seconds (log)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let ticks: std::collections::BTreeSet<u64> = sizes.iter().map(|&t| t as u64).collect();
    for t in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{t}</text>"#,
            px(t as f64),
            HEIGHT - MARGIN + 14.0
        );
    }
    for (i, (m, pts)) in models.iter().zip(&curves).enumerate() {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(t, y))| {
                format!(
                    "{}{:.2},{:.2}",
                    if j == 0 { "M" } else { "L" },
                    px(t),
                    py(y)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path class="model" data-model="{}" d="{}" stroke="{}" stroke-dasharray="5,4" fill="none"/>"#,
            m.name(),
            d.join(" "),
            COLORS[(runs.len() + i) % COLORS.len()]
        );
    }
    for (i, r) in runs.iter().enumerate() {
        let pts: Vec<String> = r
            .sizes
            .iter()
            .zip(&r.median_seconds)
            .map(|(&t, &y)| format!("{:.2},{:.2}", px(t as f64), py(y)))
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<polyline class="kernel" data-kernel="{}" points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            r.kernel,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}{}</text>"#,
            MARGIN + 10.0,
            MARGIN + 14.0 * i as f64,
            r.kernel,
            r.fit
                .map_or(String::new(), |f| format!(" (slope {:.2})", f.slope))
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (1.0, 10.0)
    } else if lo == hi {
        (lo / 2.0, hi * 2.0)
    } else {
        (lo, hi)
    }
}

fn span(lo: f64, hi: f64) -> f64 {
    (hi.log10() - lo.log10()).max(1e-12)
}

pub fn emit_report(
    runs: &[ScalingRun],
    models: &[ComplexityModel],
    args: &CostArgs,
    csv: &Path,
    svg: &Path,
) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("no scaling runs to report".into()));
    }
    write_csv(runs, csv)?;
    std::fs::write(svg, render_svg(runs, models, args)).map_err(|e| Error::io(svg, e))
}
