//! Standalone SVG figures of regression predictions.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Batch, NeuralProcess, Prediction};
use crate::pipeline::Predictor;
use crate::rng::Rng;
use crate::taskgen::Episode;
use crate::tensor::Tensor;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 40.0;

/// Values drawn in the figure, embedded as JSON in its `<metadata>`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotData {
    pub task_id: u64,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `2·√variance`
    pub halfwidth: Vec<f64>,
    pub truth: Vec<f64>,
    pub context_x: Vec<f64>,
    pub context_y: Vec<f64>,
}

fn choose_model<'a>(pred: Predictor<'a>, batch: &Batch) -> Result<&'a NeuralProcess> {
    match pred {
        Predictor::Single(m) => Ok(m),
        Predictor::Routed {
            embedder,
            clusters,
            models,
        } => {
            let emb = embedder.embed_context(batch)?;
            let k = clusters.route(&emb[0])?;
            models
                .get(k)
                .ok_or_else(|| Error::MissingCheckpoint(format!("no model for cluster {k}")))
        }
    }
}

/// Predictive mean and variance of `episode` on `grid` evenly spaced inputs.
pub fn plot_data(pred: Predictor<'_>, episode: &Episode, domain: (f64, f64), grid: usize, samples: usize, seed: u64) -> Result<PlotData> {
    if episode.is_classification() {
        return Err(Error::Config("plots are available for regression episodes only".into()));
    }
    let grid = grid.max(2);
    let x: Vec<f64> = (0..grid)
        .map(|i| domain.0 + (domain.1 - domain.0) * i as f64 / (grid - 1) as f64)
        .collect();
    let view = episode.view();
    let batch = Batch {
        size: 1,
        way: 1,
        context_x: view.context_x.reshape(&[1, view.context_x.shape()[0], 1])?,
        context_y: view.context_y.reshape(&[1, view.context_y.shape()[0], 1])?,
        target_x: Tensor::new(&[1, grid, 1], x.clone())?,
        target_y: None,
    };
    let model = choose_model(pred, &batch)?;
    let mut rng = Rng::derived(seed, "plot-mc", episode.task_seed);
    let Prediction::Regression { mean, variance, .. } = model.predict(&batch, samples, &mut rng)? else {
        return Err(Error::Config("plots are available for regression models only".into()));
    };
    let truth = match episode.coeffs() {
        Some(c) => x.iter().map(|&v| c.eval(v)).collect(),
        None => Vec::new(),
    };
    let variance = variance.to_vec();
    Ok(PlotData {
        task_id: episode.task_seed,
        halfwidth: variance.iter().map(|v| 2.0 * v.sqrt()).collect(),
        mean: mean.to_vec(),
        variance,
        truth,
        x,
        context_x: view.context_x.to_vec(),
        context_y: view.context_y.to_vec(),
    })
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = String::new();
    for (i, (x, y)) in points.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// Renders the figure. `target` holds the hidden target points drawn as the
/// true curve when no closed form exists (GP tasks).
pub fn render_svg(data: &PlotData, target: Option<(&[f64], &[f64])>) -> Result<String> {
    let mut ys: Vec<f64> = data
        .mean
        .iter()
        .zip(&data.halfwidth)
        .flat_map(|(m, h)| [m - h, m + h])
        .chain(data.truth.iter().copied())
        .chain(data.context_y.iter().copied())
        .collect();
    if let Some((_, ty)) = target {
        ys.extend_from_slice(ty);
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let (x0, x1) = (data.x[0], data.x[data.x.len() - 1]);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);

    let upper = data.x.iter().zip(&data.mean).zip(&data.halfwidth).map(|((&x, m), h)| (sx(x), sy(m + h)));
    let lower = data
        .x
        .iter()
        .zip(&data.mean)
        .zip(&data.halfwidth)
        .rev()
        .map(|((&x, m), h)| (sx(x), sy(m - h)));
    let band = polyline(upper.chain(lower));
    let mean = polyline(data.x.iter().zip(&data.mean).map(|(&x, &m)| (sx(x), sy(m))));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, "<metadata>{}</metadata>", serde_json::to_string(data)?);
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="#444444"/>"##,
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    );
    let _ = writeln!(svg, r##"<polygon points="{band}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>"##);
    if !data.truth.is_empty() {
        let truth = polyline(data.x.iter().zip(&data.truth).map(|(&x, &y)| (sx(x), sy(y))));
        let _ = writeln!(
            svg,
            r##"<polyline points="{truth}" fill="none" stroke="#222222" stroke-dasharray="4 3"/>"##
        );
    } else if let Some((tx, ty)) = target {
        let mut pts: Vec<(f64, f64)> = tx.iter().copied().zip(ty.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let truth = polyline(pts.into_iter().map(|(x, y)| (sx(x), sy(y))));
        let _ = writeln!(
            svg,
            r##"<polyline points="{truth}" fill="none" stroke="#222222" stroke-dasharray="4 3"/>"##
        );
    }
    let _ = writeln!(svg, r##"<polyline points="{mean}" fill="none" stroke="#4c72b0" stroke-width="2"/>"##);
    for (&x, &y) in data.context_x.iter().zip(&data.context_y) {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#000000"/>"##,
            sx(x),
            sy(y)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
