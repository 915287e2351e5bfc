use std::path::Path;

use anyhow::{anyhow, Result};
use coach_core::sim::{PolicyArm, StudyReport};
use plotters::prelude::*;

/// Pooled mean reward per session with a one-standard-error band, one line per arm.
pub fn reward_trend(report: &StudyReport, path: &Path) -> Result<()> {
    let series: Vec<(PolicyArm, Vec<(f64, f64, f64)>)> = report
        .arms
        .iter()
        .map(|a| {
            let pts = a
                .sessions
                .iter()
                .filter(|s| s.n > 0 && s.mean.is_finite())
                .map(|s| (s.session as f64, s.mean, s.std / (s.n as f64).sqrt()))
                .collect();
            (a.arm, pts)
        })
        .collect();
    let ys = series.iter().flat_map(|(_, p)| p.iter().flat_map(|&(_, m, e)| [m - e, m + e]));
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let (lo, hi) = if lo.is_finite() { (lo - 0.5, hi + 0.5) } else { (-1.0, 1.0) };
    let sessions = report.config.sessions.max(1) as f64;

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.5..sessions + 0.5, lo..hi)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("session")
        .y_desc("mean reward")
        .x_labels(report.config.sessions.max(1))
        .x_label_formatter(&|x| format!("{x:.0}"))
        .draw()
        .map_err(|e| err(&e))?;
    for (arm, pts) in &series {
        let color = match arm {
            PolicyArm::Adaptive => RGBColor(200, 60, 40),
            PolicyArm::GenericFrozen => RGBColor(40, 90, 200),
        };
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(x, m, _)| (x, m)), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(arm.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.iter().map(|&(x, m, e)| {
                ErrorBar::new_vertical(x, m - e, m, m + e, color.filled(), 8)
            }))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
