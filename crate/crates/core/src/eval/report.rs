use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use super::{EvalReport, YawRate};
use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const RANK1_PNG: &str = "rank1_vs_yaw.png";
pub const ROC_PNG: &str = "roc.png";

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Registers a system sans-serif font once; plots are drawn without text
/// when none is found.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        FONT_CANDIDATES.iter().any(|p| match fs::read(p) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => false,
        })
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn rate_at(rates: &[YawRate], yaw: f64) -> Option<f64> {
    rates.iter().find(|r| (r.yaw_deg - yaw).abs() < 1e-9).map(|r| r.rate)
}

fn rank1_table(out: &mut String, r: &EvalReport) {
    writeln!(out, "| Yaw (deg) | Frontalized rank-1 (%) | Raw profile rank-1 (%) |").unwrap();
    writeln!(out, "|---:|---:|---:|").unwrap();
    for yr in &r.rank1_by_yaw {
        let base = rate_at(&r.baseline_rank1_by_yaw, yr.yaw_deg).map(pct).unwrap_or_else(|| "n/a".into());
        writeln!(out, "| {} | {} | {} |", yr.yaw_deg, pct(yr.rate), base).unwrap();
    }
}

fn verification_table(out: &mut String, rows: &[&EvalReport]) {
    write!(out, "| Run | ACC (%) | AUC (%) |").unwrap();
    let fars: Vec<f64> = rows[0].tar_at_far.iter().map(|p| p.0).collect();
    for f in &fars {
        write!(out, " TAR@FAR={f} (%) |").unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "|---|---:|---:|{}", "---:|".repeat(fars.len())).unwrap();
    for r in rows {
        write!(out, "| {} | {} | {} |", r.label, pct(r.verification_acc), pct(r.verification_auc)).unwrap();
        for (_, t) in &r.tar_at_far {
            write!(out, " {} |", pct(*t)).unwrap();
        }
        writeln!(out).unwrap();
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_else(|| "n/a".into())
}

/// Markdown rendering: a rank-1 table with one row per yaw bin, a
/// verification table and, when present, the ablation comparison.
pub fn render_markdown(r: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "# Recognition via generation: {}\n", r.label).unwrap();
    writeln!(out, "Probes: {}; gallery: {} (one frontal per identity).\n", r.num_probe, r.num_gallery).unwrap();
    writeln!(out, "## Rank-1 identification\n").unwrap();
    rank1_table(&mut out, r);
    let (front, base) = r.large_pose_rank1();
    writeln!(
        out,
        "\nMean over ±60°/±90°: frontalized {} %, raw profile {} %.\n",
        fmt_opt(front),
        fmt_opt(base)
    )
    .unwrap();
    writeln!(out, "## Verification\n").unwrap();
    let mut rows = vec![r];
    if let Some(a) = &r.ablation {
        rows.push(a);
    }
    verification_table(&mut out, &rows);
    if let Some(a) = &r.ablation {
        writeln!(out, "\n## Ablation: {} vs {}\n", r.label, a.label).unwrap();
        writeln!(out, "| Yaw (deg) | {} rank-1 (%) | {} rank-1 (%) |", r.label, a.label).unwrap();
        writeln!(out, "|---:|---:|---:|").unwrap();
        for yr in &r.rank1_by_yaw {
            let other = rate_at(&a.rank1_by_yaw, yr.yaw_deg).map(pct).unwrap_or_else(|| "n/a".into());
            writeln!(out, "| {} | {} | {} |", yr.yaw_deg, pct(yr.rate), other).unwrap();
        }
        let (fa, _) = a.large_pose_rank1();
        let verdict = match (front, fa) {
            (Some(x), Some(y)) if x >= y => "full model at least as good",
            (Some(_), Some(_)) => "ablation better",
            _ => "not comparable",
        };
        writeln!(
            out,
            "\nMean over ±60°/±90°: {} {} %, {} {} % ({verdict}).",
            r.label,
            fmt_opt(front),
            a.label,
            fmt_opt(fa)
        )
        .unwrap();
    }
    out
}

fn draw_rank1(r: &EvalReport, path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (lo, hi) = r
        .rank1_by_yaw
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), y| (a.min(y.yaw_deg), b.max(y.yaw_deg)));
    let (lo, hi) = (lo - 5.0, hi + 5.0);
    let text = font_available();
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption("Rank-1 vs yaw", ("sans-serif", 24))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(lo..hi, 0.0..1.05).map_err(plot_err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc("yaw (deg)")
            .y_desc("rank-1")
            .draw()
            .map_err(plot_err)?;
    }
    let mut series: Vec<(String, &[YawRate], RGBColor)> = vec![
        (format!("{} frontalized", r.label), &r.rank1_by_yaw, BLUE),
        ("raw profile".to_string(), &r.baseline_rank1_by_yaw, RED),
    ];
    if let Some(a) = &r.ablation {
        series.push((format!("{} frontalized", a.label), &a.rank1_by_yaw, GREEN));
    }
    for (name, rates, color) in series {
        let pts: Vec<(f64, f64)> = rates.iter().map(|y| (y.yaw_deg, y.rate)).collect();
        let drawn = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            drawn
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn draw_roc(r: &EvalReport, path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let text = font_available();
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption("Verification ROC", ("sans-serif", 24))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(0.0..1.0, 0.0..1.0).map_err(plot_err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc("false accept rate")
            .y_desc("true accept rate")
            .draw()
            .map_err(plot_err)?;
    }
    chart
        .draw_series(LineSeries::new(vec![(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3)))
        .map_err(plot_err)?;
    let mut curves = vec![(r, BLUE)];
    if let Some(a) = &r.ablation {
        curves.push((a, GREEN));
    }
    for (rep, color) in curves {
        let drawn = chart
            .draw_series(LineSeries::new(rep.roc.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            drawn
                .label(format!("{} (AUC {:.3})", rep.label, rep.verification_auc))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `report.json`, `report.md`, `rank1_vs_yaw.png` and `roc.png` into
/// `out_dir` and returns their paths.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_vec_pretty(report)?)?;
    let md = out_dir.join(REPORT_MD);
    fs::write(&md, render_markdown(report))?;
    let rank1 = out_dir.join(RANK1_PNG);
    draw_rank1(report, &rank1)?;
    let roc = out_dir.join(ROC_PNG);
    draw_roc(report, &roc)?;
    Ok(vec![json, md, rank1, roc])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: &str) -> EvalReport {
        let yaws = [-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0];
        EvalReport {
            label: label.into(),
            rank1_by_yaw: yaws.iter().map(|&y| YawRate { yaw_deg: y, rate: 1.0 - y.abs() / 200.0 }).collect(),
            baseline_rank1_by_yaw: yaws.iter().map(|&y| YawRate { yaw_deg: y, rate: 1.0 - y.abs() / 100.0 }).collect(),
            verification_acc: 0.8,
            verification_auc: 0.85,
            tar_at_far: vec![(0.01, 0.3), (0.001, 0.1)],
            roc: vec![(0.0, 0.0), (0.1, 0.5), (0.4, 0.9), (1.0, 1.0)],
            num_probe: 21,
            num_gallery: 3,
            ablation: None,
        }
    }

    #[test]
    fn json_round_trip() {
        let mut r = sample("full");
        r.ablation = Some(Box::new(sample("no-ardl")));
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), r);
    }

    #[test]
    fn markdown_has_one_row_per_yaw() {
        let md = render_markdown(&sample("full"));
        let section = md.split("## Verification").next().unwrap();
        let rows = section.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Yaw")).count();
        assert_eq!(rows, 7);
    }

    #[test]
    fn ablation_section_rendered() {
        let mut r = sample("full");
        r.ablation = Some(Box::new(sample("no-ardl")));
        let md = render_markdown(&r);
        assert!(md.contains("## Ablation: full vs no-ardl"));
        assert!(md.contains("| no-ardl |"));
    }

    #[test]
    fn files_written() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&sample("full"), dir.path()).unwrap();
        for p in paths {
            assert!(fs::metadata(&p).unwrap().len() > 0, "{}", p.display());
        }
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(emit_report(&sample("full"), &file.join("sub")).is_err());
    }
}
