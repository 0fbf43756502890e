//! Loss-curve and metric-bar SVGs plus a markdown summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use panoptic4d::metrics::MetricReport;
use panoptic4d::synthworld::write_atomic;

use crate::error::{io, CliError};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
pub const BAR_METRICS: [&str; 6] = ["pq", "miou", "ptq", "s_assoc", "lstq", "pat"];

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    /// (step, loss) taken from the first and last CSV columns.
    pub points: Vec<(f64, f64)>,
}

/// `name=path` or a bare path; bare paths are named `<parent>/<stem>`.
pub fn named_input(spec: &str) -> (String, PathBuf) {
    if let Some((n, p)) = spec.split_once('=') {
        return (n.to_string(), PathBuf::from(p));
    }
    let p = PathBuf::from(spec);
    let stem = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match p.parent().and_then(|d| d.file_name()) {
        Some(d) => format!("{}/{stem}", d.to_string_lossy()),
        None => stem,
    };
    (name, p)
}

pub fn read_curve(name: &str, path: &Path) -> Result<Curve, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| CliError::Io(format!("{}: line {}: bad number `{s}`", path.display(), n + 1)));
        points.push((parse(cols[0])?, parse(cols[cols.len() - 1])?));
    }
    Ok(Curve { name: name.into(), points })
}

pub fn read_report(path: &Path) -> Result<MetricReport, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(out, r#"<path d="M{PAD},{PAD} L{PAD},{} L{},{}" stroke="black" fill="none"/>"#, H - PAD, W - PAD, H - PAD);
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - 170.0, y, COLORS[i % COLORS.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, W - 155.0, y + 9.0, escape(n));
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn loss_svg(curves: &[Curve]) -> String {
    let mut out = String::new();
    svg_open(&mut out, "training loss");
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points.iter().copied()).filter(|p| p.1.is_finite()).collect();
    if all.is_empty() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
    } else {
        let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let sx = |x: f64| PAD + (W - 2.0 * PAD) * if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
        let sy = |y: f64| H - PAD - (H - 2.0 * PAD) * if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 };
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">{y1:.4}</text>"#, 4.0, PAD);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">{y0:.4}</text>"#, 4.0, H - PAD);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">step {x1}</text>"#,
            W - PAD,
            H - PAD + 14.0
        );
        for (i, c) in curves.iter().enumerate() {
            let pts: Vec<String> = c.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#, pts.join(" "), COLORS[i % COLORS.len()]);
        }
        legend(&mut out, &curves.iter().map(|c| c.name.as_str()).collect::<Vec<_>>());
    }
    out.push_str("</svg>\n");
    out
}

fn metric(r: &MetricReport, name: &str) -> f64 {
    r.means.named().iter().find(|(n, _)| *n == name).map_or(0.0, |(_, v)| *v)
}

pub fn metrics_svg(reports: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    svg_open(&mut out, "metrics");
    if reports.is_empty() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
    } else {
        let group = (W - 2.0 * PAD) / BAR_METRICS.len() as f64;
        let bar = group * 0.8 / reports.len() as f64;
        for (m, name) in BAR_METRICS.iter().enumerate() {
            let gx = PAD + group * m as f64 + group * 0.1;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{name}</text>"#,
                gx + group * 0.4,
                H - PAD + 14.0
            );
            for (k, (_, r)) in reports.iter().enumerate() {
                let v = metric(r, name).clamp(0.0, 1.0);
                let h = (H - 2.0 * PAD) * v;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    gx + bar * k as f64,
                    H - PAD - h,
                    bar,
                    h,
                    COLORS[k % COLORS.len()]
                );
            }
        }
        legend(&mut out, &reports.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    }
    out.push_str("</svg>\n");
    out
}

pub fn summary_markdown(curves: &[Curve], reports: &[(String, MetricReport)]) -> String {
    let mut md = String::from("# Run summary\n\n## Training\n\n");
    if curves.iter().all(|c| c.points.is_empty()) {
        md.push_str("no data\n");
    } else {
        md.push_str("| run | steps | first loss | last loss |\n|---|---|---|---|\n");
        for c in curves {
            match (c.points.first(), c.points.last()) {
                (Some(a), Some(b)) => {
                    let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", c.name, c.points.len(), a.1, b.1);
                }
                _ => {
                    let _ = writeln!(md, "| {} | 0 | no data | no data |", c.name);
                }
            }
        }
    }
    md.push_str("\n## Metrics\n\n");
    if reports.is_empty() {
        md.push_str("no data\n");
    } else {
        let names = reports[0].1.means.named().map(|(n, _)| n);
        let _ = writeln!(md, "| metric | {} |", reports.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(reports.len()));
        for n in names {
            let vals: Vec<String> = reports.iter().map(|(_, r)| format!("{:.4}", metric(r, n))).collect();
            let _ = writeln!(md, "| {n} | {} |", vals.join(" | "));
        }
    }
    md
}

pub fn report(logs: &[String], reports: &[String], out: &Path) -> Result<(), CliError> {
    let curves = logs
        .iter()
        .map(|s| {
            let (n, p) = named_input(s);
            read_curve(&n, &p)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reports = reports
        .iter()
        .map(|s| {
            let (n, p) = named_input(s);
            read_report(&p).map(|r| (n, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    write_atomic(&out.join("loss.svg"), loss_svg(&curves).as_bytes())?;
    write_atomic(&out.join("metrics.svg"), metrics_svg(&reports).as_bytes())?;
    write_atomic(&out.join("summary.md"), summary_markdown(&curves, &reports).as_bytes())?;
    Ok(())
}
