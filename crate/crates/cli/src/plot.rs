//! SVG loss curves and AP bar charts, each with a JSON twin.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use mapfm_core::evaluator::ApReport;
use mapfm_core::trainer::{EvalRecord, StepMetrics};

use crate::write_json;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 7] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#111111",
];
const FLOOR: f64 = 1e-6;

pub fn run(metrics: &Path, eval: Option<&Path>, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let steps = read_metrics(metrics)?;
    if steps.is_empty() {
        bail!("{} holds no metrics", metrics.display());
    }
    let series = loss_series(&steps);
    write_json(
        &out.join("loss_curves.json"),
        &json!({
            "steps": steps.iter().map(|s| s.step).collect::<Vec<_>>(),
            "series": series.iter().map(|(n, v)| json!({"name": n, "values": v})).collect::<Vec<_>>(),
        }),
    )?;
    let xs: Vec<f64> = steps.iter().map(|s| s.step as f64).collect();
    std::fs::write(out.join("loss_curves.svg"), loss_svg(&xs, &series))?;
    println!("wrote {}", out.join("loss_curves.svg").display());

    let default_eval = metrics.with_file_name("eval.jsonl");
    let eval_path = match eval {
        Some(p) => Some(p.to_path_buf()),
        None => default_eval.is_file().then_some(default_eval),
    };
    if let Some(p) = eval_path {
        let report = read_report(&p)?;
        write_json(&out.join("ap_bars.json"), &report)?;
        std::fs::write(out.join("ap_bars.svg"), ap_svg(&report))?;
        println!("wrote {}", out.join("ap_bars.svg").display());
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

/// Last record of an `eval.jsonl`, or a plain AP report.
fn read_report(path: &Path) -> Result<ApReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let last = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .with_context(|| format!("{} is empty", path.display()))?;
        let rec: EvalRecord =
            serde_json::from_str(last).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(rec.report);
    }
    Ok(ApReport::from_json(&text)?)
}

fn loss_series(steps: &[StepMetrics]) -> Vec<(&'static str, Vec<f64>)> {
    let pick: [(&str, fn(&StepMetrics) -> f64); 7] = [
        ("l_pts", |s| s.loss.l_pts),
        ("l_cls", |s| s.loss.l_cls),
        ("l_dir", |s| s.loss.l_dir),
        ("l_bevseg", |s| s.loss.l_bevseg),
        ("l_pvseg", |s| s.loss.l_pvseg),
        ("l_surf", |s| s.loss.l_surf),
        ("total", |s| s.loss.total),
    ];
    pick.iter()
        .map(|(n, f)| (*n, steps.iter().map(f).collect()))
        .collect()
}

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    );
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - 150.0, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<polyline points="{x0},{y0} {x0},{y1} {x1},{y1}" fill="none" stroke="black"/>"#
    );
}

/// Log-scale loss curves; values are floored at `FLOOR` so zeros stay drawable.
fn loss_svg(xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - 150.0, HEIGHT - MARGIN);
    let logs: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, v)| v.iter().map(|y| y.max(FLOOR).log10()).collect())
        .collect();
    let lo = logs
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .floor();
    let hi = logs
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        .max(lo + 1.0);
    let (xmin, xmax) = (xs[0], xs[xs.len() - 1].max(xs[0] + 1.0));
    let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
    let py = |l: f64| y1 - (l - lo) / (hi - lo) * (y1 - y0);

    let mut s = String::new();
    svg_open(&mut s, "Training losses");
    let mut e = lo as i32;
    while e <= hi as i32 {
        let y = py(e as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">1e{e}</text>"#,
            x0 - 4.0,
            y + 4.0
        );
        e += 1;
    }
    let _ = writeln!(s, r#"<text x="{x0}" y="{}">step {xmin}</text>"#, y1 + 16.0);
    let _ = writeln!(
        s,
        r#"<text x="{x1}" y="{}" text-anchor="end">step {xmax}</text>"#,
        y1 + 16.0
    );
    for (i, ((name, _), ys)) in series.iter().zip(&logs).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &l)| format!("{:.1},{:.1}", px(x), py(l)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#,
            pts.join(" ")
        );
        let ly = y0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            x1 + 10.0,
            x1 + 30.0,
            x1 + 36.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per threshold plus the mean, one bar per class.
fn ap_svg(report: &ApReport) -> String {
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - 150.0, HEIGHT - MARGIN);
    let py = |v: f64| y1 - v.clamp(0.0, 1.0) * (y1 - y0);
    let mut groups: Vec<(String, Vec<f64>)> = report
        .thresholds
        .iter()
        .enumerate()
        .map(|(t, tau)| {
            (
                format!("{tau} m"),
                report.classes.iter().map(|c| c.ap[t]).collect(),
            )
        })
        .collect();
    groups.push((
        "mean".into(),
        report.classes.iter().map(|c| c.mean).collect(),
    ));

    let mut s = String::new();
    svg_open(
        &mut s,
        &format!("Average precision (mAP {:.3})", report.map),
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            x0 - 4.0,
            y + 4.0
        );
    }
    let group_w = (x1 - x0) / groups.len() as f64;
    let bar_w = group_w * 0.8 / report.classes.len().max(1) as f64;
    for (g, (label, values)) in groups.iter().enumerate() {
        let gx = x0 + g as f64 * group_w + group_w * 0.1;
        for (c, v) in values.iter().enumerate() {
            let y = py(*v);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{bar_w:.1}" height="{:.1}" fill="{}"><title>{v:.3}</title></rect>"#,
                gx + c as f64 * bar_w,
                y1 - y,
                PALETTE[c % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{label}</text>"#,
            gx + group_w * 0.4,
            y1 + 16.0
        );
    }
    for (c, class) in report.classes.iter().enumerate() {
        let ly = y0 + 16.0 * c as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            x1 + 10.0,
            ly - 5.0,
            PALETTE[c % PALETTE.len()],
            x1 + 28.0,
            ly + 4.0,
            class.class.name()
        );
    }
    s.push_str("</svg>\n");
    s
}
