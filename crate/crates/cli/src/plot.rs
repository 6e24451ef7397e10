use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use fliplearn_core::eval::EvalReport;

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Points of one report: per-variant values for sweeps, else per-template.
fn series(report: &EvalReport) -> Vec<(String, f64)> {
    if report.per_variant.is_empty() {
        report
            .per_template
            .iter()
            .map(|t| (t.template_id.clone(), t.value))
            .collect()
    } else {
        report
            .per_variant
            .iter()
            .map(|v| (v.variant.clone(), v.value))
            .collect()
    }
}

/// One line per report over a shared x axis of variants (or templates).
pub fn plot_reports(reports: &[EvalReport], out: &Path) -> Result<()> {
    let all: Vec<Vec<(String, f64)>> = reports.iter().map(series).collect();
    let names: Vec<String> = all[0].iter().map(|(n, _)| n.clone()).collect();
    if all
        .iter()
        .any(|s| s.iter().map(|(n, _)| n).ne(names.iter()))
    {
        bail!("reports to plot together must cover the same variants or templates");
    }
    if names.is_empty() {
        bail!("nothing to plot");
    }
    let err = |e: DrawingAreaErrorKind<_>| anyhow!("drawing {}: {e:?}", out.display());
    let width = (120 + 48 * names.len() as u32).max(480);
    let root = SVGBackend::new(out, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let metric = reports[0].metric;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("{} on {}", metric, reports[0].task_id),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5f64..names.len() as f64 - 0.5, 0f64..1f64)
        .map_err(err)?;
    let labels = names.clone();
    chart
        .configure_mesh()
        .x_labels(names.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_label_style(
            ("sans-serif", 11)
                .into_font()
                .transform(FontTransform::Rotate90),
        )
        .y_desc(metric.to_string())
        .draw()
        .map_err(err)?;
    for (i, (report, points)) in reports.iter().zip(&all).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let xy: Vec<(f64, f64)> = points
            .iter()
            .enumerate()
            .map(|(x, (_, y))| (x as f64, *y))
            .collect();
        chart
            .draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))
            .map_err(err)?
            .label(report.label())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
        chart
            .draw_series(xy.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
