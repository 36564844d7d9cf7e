//! SVG charts of gallery-size sweeps and training losses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::train::StepLog;
use crate::data::GallerySize;
use crate::error::{Error, Result};
use crate::evaluation::MetricsRow;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(format!("plotting failed: {e}"))
}

const COLOURS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One curve per (dataset, source, mode), with gallery size on the x axis.
/// An `all` gallery is placed one step beyond the largest fixed size.
/// Writes `map.svg` and `top1.svg` into `out_dir`.
pub fn plot_sweep(rows: &[MetricsRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Config("no metric rows to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let largest = rows
        .iter()
        .filter_map(|r| match r.gallery_size {
            GallerySize::Fixed(n) => Some(n),
            GallerySize::All => None,
        })
        .max()
        .unwrap_or(1);
    let x_of = |g: GallerySize| match g {
        GallerySize::Fixed(n) => n as f64,
        GallerySize::All => largest as f64 * 2.0,
    };
    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        let key = match &r.source_dataset {
            Some(s) => format!("{s} -> {} ({})", r.dataset, r.mode),
            None => format!("{} ({})", r.dataset, r.mode),
        };
        series.entry(key).or_default().push((x_of(r.gallery_size), r.map, r.top1));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let x_max = series.values().flatten().map(|p| p.0).fold(1.0, f64::max) * 1.05;

    let mut written = Vec::new();
    for (file, title, pick) in [
        ("map.svg", "mAP (%)", 1usize),
        ("top1.svg", "top-1 (%)", 2usize),
    ] {
        let path = out_dir.join(file);
        {
            let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{title} vs gallery size"), ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(48)
                .build_cartesian_2d(0.0..x_max, 0.0..100.0)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("gallery size")
                .y_desc(title)
                .draw()
                .map_err(plot_err)?;
            for (i, (name, pts)) in series.iter().enumerate() {
                let c = COLOURS[i % COLOURS.len()];
                let xy: Vec<(f64, f64)> = pts
                    .iter()
                    .map(|p| (p.0, 100.0 * if pick == 1 { p.1 } else { p.2 }))
                    .collect();
                chart
                    .draw_series(LineSeries::new(xy.clone(), c.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(name.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
                chart
                    .draw_series(xy.into_iter().map(|p| Circle::new(p, 3, c.filled())))
                    .map_err(plot_err)?;
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Total training loss per step.
pub fn plot_losses(logs: &[StepLog], path: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::Config("no training log rows to plot".into()));
    }
    let x_max = logs.last().map_or(1, |l| l.step) as f64;
    let y_max = logs.iter().map(|l| l.loss).fold(0.0, f64::max).max(1e-6) * 1.05;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            logs.iter().map(|l| (l.step as f64, l.loss)),
            COLOURS[0].stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
