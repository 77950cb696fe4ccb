//! Static SVG figures.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use odg_core::engine::experiment::GridTable;
use odg_core::engine::train::{LossRecord, LOSS_COMPONENTS};

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// One line per loss component against the step.
pub fn loss_curves(records: &[LossRecord], title: &str, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(0).max(1);
    let (lo, hi) = bounds(records.iter().map(|r| r.value));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..max_step as f64, lo..hi)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(err)?;
    for (i, comp) in LOSS_COMPONENTS.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.component == *comp)
            .map(|r| (r.step as f64, r.value))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(err)?
            .label(*comp)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
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

/// Two panels (acc, hs) against the number of known classes, one curve per
/// table row.
pub fn known_classes(acc: &GridTable, hs: &GridTable, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let panels = root.split_evenly((1, 2));
    for (area, table, label) in [(&panels[0], acc, "acc"), (&panels[1], hs, "hs")] {
        let xs: Vec<f64> = table
            .col_labels
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| anyhow!("column {c:?} is not a class count")))
            .collect::<Result<_>>()?;
        let (x_lo, x_hi) = bounds(xs.iter().copied());
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{label} vs number of known classes"), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(x_lo..x_hi, 0f64..100f64)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("known classes")
            .y_desc(label)
            .draw()
            .map_err(err)?;
        for (i, row) in table.row_labels.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<(f64, f64)> = xs
                .iter()
                .zip(&table.mean[i])
                .filter_map(|(&x, v)| v.map(|v| (x, v)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(err)?
                .label(row.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}
