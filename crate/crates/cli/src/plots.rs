//! SVG charts rendered from run artifacts.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use pal_core::training::{StepRecord, WeightStats};
use pal_core::{CoreError, Result};
use plotters::prelude::*;

const PLOT_SIZE: (u32, u32) = (800, 500);

/// Scalar loss per optimizer step, read from `steps.jsonl`.
pub fn loss_vs_step(steps_file: &Path, out: &Path) -> Result<()> {
    let file = File::open(steps_file).map_err(|e| CoreError::io(steps_file, e))?;
    let mut points = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CoreError::io(steps_file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord =
            serde_json::from_str(&line).map_err(|e| CoreError::json(steps_file, e))?;
        points.push((record.step as f64, record.scalar_loss));
    }
    draw_lines(out, "training loss", "step", "loss", &[("loss", BLUE, points)])
}

/// Average dice per epoch, read from `metrics.csv`.
pub fn dice_vs_epoch(metrics_file: &Path, out: &Path) -> Result<()> {
    let mut reader =
        csv::Reader::from_path(metrics_file).map_err(|e| CoreError::csv(metrics_file, e))?;
    let headers = reader.headers().map_err(|e| CoreError::csv(metrics_file, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "{}: missing column {name}",
                metrics_file.display()
            ))
        })
    };
    let epoch_col = column("epoch")?;
    let dice_col = column("average_dice")?;
    let mut points = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CoreError::csv(metrics_file, e))?;
        points.push((parse_cell(metrics_file, &row[epoch_col])?, parse_cell(
            metrics_file,
            &row[dice_col],
        )?));
    }
    draw_lines(out, "evaluation dice", "epoch", "average dice", &[(
        "average dice",
        BLUE,
        points,
    )])
}

/// Mean relative weight of clean vs corrupted samples, read from
/// `weight_stats.csv`.
pub fn weight_dynamics(stats_file: &Path, out: &Path) -> Result<()> {
    let mut reader =
        csv::Reader::from_path(stats_file).map_err(|e| CoreError::csv(stats_file, e))?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for row in reader.deserialize() {
        let row: WeightStats = row.map_err(|e| CoreError::csv(stats_file, e))?;
        let step = row.step as f64;
        if let Some(m) = row.mean_clean {
            clean.push((step, m));
        }
        if let Some(m) = row.mean_noisy {
            noisy.push((step, m));
        }
    }
    draw_lines(out, "relative weight by group", "step", "mean relative weight", &[
        ("clean", BLUE, clean),
        ("corrupted", RED, noisy),
    ])
}

fn parse_cell(path: &Path, cell: &str) -> Result<f64> {
    cell.parse().map_err(|_| {
        CoreError::InvalidArgument(format!("{}: bad number {cell:?}", path.display()))
    })
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CoreError {
    CoreError::io(path, std::io::Error::other(e.to_string()))
}

fn padded_range(lo: f64, hi: f64) -> Range<f64> {
    let span = hi - lo;
    let margin = if span > 0.0 { span * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    (lo - margin)..(hi + margin)
}

fn draw_lines(
    out: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, RGBColor, Vec<(f64, f64)>)],
) -> Result<()> {
    let finite = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite();
    let all: Vec<(f64, f64)> =
        series.iter().flat_map(|(_, _, pts)| pts.iter().filter(|p| finite(p))).copied().collect();
    if all.is_empty() {
        log::warn!("{}: no data points, plot skipped", out.display());
        return Ok(());
    }
    let fold = |f: fn(f64, f64) -> f64, init, pick: fn(&(f64, f64)) -> f64| {
        all.iter().map(pick).fold(init, f)
    };
    let x_range = padded_range(
        fold(f64::min, f64::INFINITY, |p| p.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0),
    );
    let y_range = padded_range(
        fold(f64::min, f64::INFINITY, |p| p.1),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1),
    );

    let root = SVGBackend::new(out, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(out, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_range, y_range)
        .map_err(|e| plot_err(out, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(out, e))?;
    for (name, color, pts) in series {
        if pts.is_empty() {
            continue;
        }
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied().filter(finite), color))
            .map_err(|e| plot_err(out, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(out, e))?;
    }
    root.present().map_err(|e| plot_err(out, e))?;
    Ok(())
}
