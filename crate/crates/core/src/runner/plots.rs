//! SVG figures. Output depends only on the data passed in, so identical
//! inputs give identical bytes.

use std::path::Path;

use plotters::coord::types::RangedCoordf64;
use plotters::prelude::*;

use crate::error::{LabError, Result};

const SIZE: (u32, u32) = (900, 640);

fn plot_err<E: std::fmt::Display>(e: E) -> LabError {
    LabError::Plot(e.to_string())
}

const STOPS: [(f64, (u8, u8, u8)); 5] = [
    (0.0, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.5, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.0, (253, 231, 37)),
];

/// Viridis-like colour for `t ∈ [0, 1]`.
pub fn colour(t: f64) -> RGBColor {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if t <= b {
            let f = (t - a) / (b - a);
            let mix = |x: u8, y: u8| (x as f64 + f * (y as f64 - x as f64)).round() as u8;
            return RGBColor(mix(ca.0, cb.0), mix(ca.1, cb.1), mix(ca.2, cb.2));
        }
    }
    RGBColor(253, 231, 37)
}

/// Cell grid with optional overlays, in cell units.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub x_desc: &'a str,
    pub y_desc: &'a str,
    pub x_labels: Vec<String>,
    pub y_labels: Vec<String>,
    /// `values[y][x]`; `None` cells are hatched.
    pub values: Vec<Vec<Option<f64>>>,
    pub range: (f64, f64),
    /// Polyline drawn on top, in cell coordinates (cell centres at `i + 0.5`).
    pub overlay: Vec<(f64, f64)>,
    /// Markers on top, same coordinates.
    pub markers: Vec<(f64, f64)>,
}

fn label_for(labels: &[String], v: f64) -> String {
    let i = v.floor();
    if (v - i - 0.5).abs() < 1e-9 && i >= 0.0 && (i as usize) < labels.len() {
        labels[i as usize].clone()
    } else {
        String::new()
    }
}

pub fn heatmap(path: &Path, h: &Heatmap<'_>) -> Result<()> {
    let (nx, ny) = (h.x_labels.len(), h.y_labels.len());
    if nx == 0 || ny == 0 {
        return Err(LabError::Plot("empty heatmap".into()));
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(h.title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..nx as f64, 0f64..ny as f64)
        .map_err(plot_err)?;
    let xf = |v: &f64| label_for(&h.x_labels, *v);
    let yf = |v: &f64| label_for(&h.y_labels, *v);
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc(h.x_desc)
        .y_desc(h.y_desc)
        .x_labels(2 * nx + 1)
        .y_labels(2 * ny.min(40) + 1)
        .x_label_formatter(&xf)
        .y_label_formatter(&yf)
        .draw()
        .map_err(plot_err)?;
    let (lo, hi) = h.range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (y, row) in h.values.iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            let (x0, y0, x1, y1) = (x as f64, y as f64, x as f64 + 1.0, y as f64 + 1.0);
            match v {
                Some(v) => {
                    let c = colour((v - lo) / span);
                    chart.draw_series(std::iter::once(Rectangle::new([(x0, y0), (x1, y1)], c.filled()))).map_err(plot_err)?;
                }
                None => {
                    chart
                        .draw_series(std::iter::once(Rectangle::new([(x0, y0), (x1, y1)], RGBColor(220, 220, 220).filled())))
                        .map_err(plot_err)?;
                    let hatch = (0..4).map(|i| {
                        let f = i as f64 / 4.0;
                        PathElement::new(vec![(x0 + f, y0), (x1, y1 - f)], BLACK.stroke_width(1))
                    });
                    chart.draw_series(hatch).map_err(plot_err)?;
                }
            }
        }
    }
    if h.overlay.len() > 1 {
        chart.draw_series(LineSeries::new(h.overlay.clone(), RED.stroke_width(3))).map_err(plot_err)?;
    }
    if !h.markers.is_empty() {
        chart
            .draw_series(h.markers.iter().map(|&(x, y)| Cross::new((x, y), 6, WHITE.stroke_width(2))))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct XyPlot<'a> {
    pub title: &'a str,
    pub x_desc: &'a str,
    pub y_desc: &'a str,
    pub series: Vec<Series>,
    pub log_x: bool,
    /// Draw markers instead of lines.
    pub scatter: bool,
    pub vline: Option<(f64, &'a str)>,
}

fn bounds(series: &[Series], log_x: bool) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let pts: Vec<_> = pts.filter(|p| !log_x || p.0 > 0.0).collect();
    let fold = |f: fn(&(f64, f64)) -> f64| {
        pts.iter().map(|p| f(p)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (mut x, mut y) = (fold(|p| p.0), fold(|p| p.1));
    if !x.0.is_finite() {
        x = if log_x { (1.0, 10.0) } else { (0.0, 1.0) };
    }
    if !y.0.is_finite() {
        y = (0.0, 1.0);
    }
    if x.1 <= x.0 {
        x = if log_x { (x.0 / 2.0, x.0 * 2.0) } else { (x.0 - 0.5, x.0 + 0.5) };
    }
    if y.1 <= y.0 {
        y = (y.0 - 0.5, y.0 + 0.5);
    }
    let pad = 0.05 * (y.1 - y.0);
    (x, (y.0 - pad, y.1 + pad))
}

fn draw_xy<'a, 'b, X>(chart: &mut ChartContext<'a, SVGBackend<'b>, Cartesian2d<X, RangedCoordf64>>, p: &XyPlot<'_>, y: (f64, f64)) -> Result<()>
where
    'b: 'a,
    X: Ranged<ValueType = f64> + plotters::coord::ranged1d::ValueFormatter<f64>,
{
    chart.configure_mesh().x_desc(p.x_desc).y_desc(p.y_desc).draw().map_err(plot_err)?;
    let n = p.series.len().max(1);
    for (i, s) in p.series.iter().enumerate() {
        let c = colour(i as f64 / (n.max(2) - 1) as f64 * 0.9);
        let pts: Vec<(f64, f64)> =
            s.points.iter().copied().filter(|q| q.0.is_finite() && q.1.is_finite() && (!p.log_x || q.0 > 0.0)).collect();
        if p.scatter {
            chart
                .draw_series(pts.iter().map(|&q| Circle::new(q, 3, c.filled())))
                .map_err(plot_err)?
                .label(s.name.clone())
                .legend(move |(x, y)| Circle::new((x + 8, y), 3, c.filled()));
        } else {
            chart
                .draw_series(LineSeries::new(pts, c.stroke_width(2)))
                .map_err(plot_err)?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
        }
    }
    if let Some((x, name)) = p.vline {
        chart
            .draw_series(LineSeries::new(vec![(x, y.0), (x, y.1)], RED.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.to_string())
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    Ok(())
}

pub fn xy(path: &Path, p: &XyPlot<'_>) -> Result<()> {
    let (x, y) = bounds(&p.series, p.log_x);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.caption(p.title, ("sans-serif", 20)).margin(12).x_label_area_size(40).y_label_area_size(60);
    if p.log_x {
        let mut chart = builder.build_cartesian_2d((x.0..x.1).log_scale(), y.0..y.1).map_err(plot_err)?;
        draw_xy(&mut chart, p, y)?;
    } else {
        let mut chart = builder.build_cartesian_2d(x.0..x.1, y.0..y.1).map_err(plot_err)?;
        draw_xy(&mut chart, p, y)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_ends() {
        assert_eq!(colour(0.0), RGBColor(68, 1, 84));
        assert_eq!(colour(1.0), RGBColor(253, 231, 37));
        assert_eq!(colour(f64::NAN), RGBColor(68, 1, 84));
    }

    #[test]
    fn identical_inputs_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap {
            title: "t",
            x_desc: "width",
            y_desc: "task",
            x_labels: vec!["1".into(), "2".into()],
            y_labels: vec!["0".into(), "1".into()],
            values: vec![vec![Some(0.1), None], vec![Some(0.9), Some(0.5)]],
            range: (0.0, 1.0),
            overlay: vec![(0.5, 0.0), (0.5, 1.0), (1.5, 1.0), (1.5, 2.0)],
            markers: vec![(1.5, 1.5)],
        };
        let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        heatmap(&a, &h).unwrap();
        heatmap(&b, &h).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let p = XyPlot {
            title: "s",
            x_desc: "x",
            y_desc: "y",
            series: vec![Series { name: "a".into(), points: vec![(1e-3, 0.1), (1e-1, 0.9)] }],
            log_x: true,
            scatter: true,
            vline: Some((1e-2, "threshold")),
        };
        xy(&a, &p).unwrap();
        xy(&b, &p).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
