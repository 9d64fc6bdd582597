//! Convergence curves from a result table.
//!
//! One curve per (service, noise level): mean top-set size across runs
//! against the iteration number. The Y axis is logarithmic because the
//! top set collapses from hundreds or thousands of pages to single
//! digits within a few iterations. Output is a tidy CSV plus a
//! self-contained SVG; no plotting backend is involved, so rendering
//! can never fail and the bytes are reproducible.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::report::{round4, ResultRow};

/// One point of one convergence curve.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
pub struct CurvePoint {
    pub service: String,
    pub noise_level: f64,
    pub iteration: usize,
    /// Mean top-set size over the runs that reached this iteration.
    pub mean_top_set_pages: f64,
    pub runs_reporting: usize,
}

/// Collapses result rows into per-iteration means, one group per
/// (service, noise level) in first-appearance order.
pub fn convergence_points(rows: &[ResultRow]) -> Vec<CurvePoint> {
    let mut group_order: Vec<(String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for row in rows {
        let key = (row.service.clone(), row.noise_level.to_bits());
        if !groups.contains_key(&key) {
            group_order.push(key.clone());
        }
        let per_iteration = groups.entry(key).or_default();
        let slot = per_iteration.entry(row.iteration).or_insert((0.0, 0));
        slot.0 += row.top_set_pages as f64;
        slot.1 += 1;
    }

    let mut points = Vec::new();
    for key in group_order {
        let per_iteration = &groups[&key];
        for (&iteration, &(sum, n)) in per_iteration {
            points.push(CurvePoint {
                service: key.0.clone(),
                noise_level: f64::from_bits(key.1),
                iteration,
                mean_top_set_pages: round4(sum / n as f64),
                runs_reporting: n,
            });
        }
    }
    points
}

pub fn write_convergence_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for point in points {
        w.serialize(point)?;
    }
    w.flush()?;
    Ok(())
}

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 520.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 210.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 55.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Renders the curves as a standalone SVG document.
pub fn render_svg(points: &[CurvePoint]) -> String {
    let mut curves: Vec<((String, u64), Vec<&CurvePoint>)> = Vec::new();
    for point in points {
        let key = (point.service.clone(), point.noise_level.to_bits());
        match curves.iter_mut().find(|(k, _)| *k == key) {
            Some((_, list)) => list.push(point),
            None => curves.push((key, vec![point])),
        }
    }

    let max_iteration = points.iter().map(|p| p.iteration).max().unwrap_or(1).max(1);
    let max_mean = points
        .iter()
        .map(|p| p.mean_top_set_pages)
        .fold(1.0_f64, f64::max);
    let decades = max_mean.log10().ceil().max(1.0) as i32;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x = |iteration: usize| {
        MARGIN_LEFT + plot_w * (iteration as f64 - 1.0) / (max_iteration as f64 - 1.0).max(1.0)
    };
    let y = |mean: f64| {
        let log = mean.max(1.0).log10();
        MARGIN_TOP + plot_h * (1.0 - log / decades as f64)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push('\n');
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push('\n');

    // Decade grid and Y tick labels.
    for d in 0..=decades {
        let gy = y(10f64.powi(d));
        svg.push_str(&format!(
            r##"<line x1="{:.2}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#dddddd"/>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        ));
        svg.push('\n');
        svg.push_str(&format!(
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="12" font-family="monospace">{}</text>"#,
            MARGIN_LEFT - 8.0,
            gy + 4.0,
            10u64.pow(d as u32)
        ));
        svg.push('\n');
    }

    // X ticks at a round step.
    let step = ((max_iteration as f64 / 10.0).ceil() as usize).max(1);
    let mut tick = 1;
    while tick <= max_iteration {
        let gx = x(tick);
        svg.push_str(&format!(
            r##"<line x1="{gx:.2}" y1="{:.2}" x2="{gx:.2}" y2="{:.2}" stroke="#eeeeee"/>"##,
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        ));
        svg.push('\n');
        svg.push_str(&format!(
            r#"<text x="{gx:.2}" y="{:.2}" text-anchor="middle" font-size="12" font-family="monospace">{tick}</text>"#,
            MARGIN_TOP + plot_h + 18.0
        ));
        svg.push('\n');
        tick += step;
    }

    // Axes and titles.
    svg.push_str(&format!(
        r#"<line x1="{l:.2}" y1="{t:.2}" x2="{l:.2}" y2="{b:.2}" stroke="black"/>"#,
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = MARGIN_TOP + plot_h
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}" stroke="black"/>"#,
        l = MARGIN_LEFT,
        r = MARGIN_LEFT + plot_w,
        b = MARGIN_TOP + plot_h
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13" font-family="monospace">iteration</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="13" font-family="monospace" transform="rotate(-90 16 {:.2})">mean top-set pages</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));
    svg.push('\n');

    // Curves with point markers, plus the legend.
    for (index, ((service, level_bits), list)) in curves.iter().enumerate() {
        let color = PALETTE[index % PALETTE.len()];
        let coords: Vec<String> = list
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.iteration), y(p.mean_top_set_pages)))
            .collect();
        if coords.len() > 1 {
            svg.push_str(&format!(
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                coords.join(" ")
            ));
            svg.push('\n');
        }
        for p in list {
            svg.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{color}"/>"#,
                x(p.iteration),
                y(p.mean_top_set_pages)
            ));
            svg.push('\n');
        }
        let ly = MARGIN_TOP + 16.0 + 18.0 * index as f64;
        svg.push_str(&format!(
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.8"/>"#,
            MARGIN_LEFT + plot_w + 38.0,
            lx = MARGIN_LEFT + plot_w + 14.0
        ));
        svg.push('\n');
        svg.push_str(&format!(
            r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="monospace">{service} @ noise {}</text>"#,
            MARGIN_LEFT + plot_w + 44.0,
            ly + 4.0,
            f64::from_bits(*level_bits)
        ));
        svg.push('\n');
    }

    svg.push_str("</svg>\n");
    svg
}

pub fn write_convergence_svg(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(render_svg(points).as_bytes())?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(service: &str, level: f64, run: usize, iteration: usize, top: usize) -> ResultRow {
        ResultRow {
            service: service.into(),
            noise_level: level,
            run,
            iteration,
            target_sample_pages: 30,
            control_sample_pages: 30,
            refined_pages: 20,
            candidate_multiplicity: 5,
            top_set_pages: top,
            x_noise: false,
            converged_at: None,
            requests_issued: 2 * iteration as u64,
        }
    }

    #[test]
    fn points_average_across_runs() {
        let rows = vec![
            row("svc", 20.0, 0, 1, 100),
            row("svc", 20.0, 1, 1, 50),
            row("svc", 20.0, 0, 2, 10),
            row("svc", 20.0, 1, 2, 4),
        ];
        let points = convergence_points(&rows);
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].mean_top_set_pages, 75.0);
        assert_eq!(points[0].runs_reporting, 2);
        assert_eq!(points[1].mean_top_set_pages, 7.0);
    }

    #[test]
    fn groups_follow_first_appearance_order() {
        let rows = vec![
            row("svc", 40.0, 0, 1, 9),
            row("svc", 20.0, 0, 1, 9),
            row("svc", 40.0, 0, 2, 3),
        ];
        let points = convergence_points(&rows);
        assert_eq!(points[0].noise_level, 40.0);
        assert_eq!(points[1].noise_level, 40.0);
        assert_eq!(points[2].noise_level, 20.0);
    }

    #[test]
    fn single_point_curves_render_markers_without_lines() {
        let rows = vec![row("svc", 20.0, 0, 1, 12)];
        let svg = render_svg(&convergence_points(&rows));
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
        assert!(svg.contains("svc @ noise 20"));
    }

    #[test]
    fn rendering_is_reproducible() {
        let rows: Vec<ResultRow> = (1..=30)
            .flat_map(|i| {
                (0..4).map(move |r| row("svc", 50.0, r, i, (2000 / i).max(2)))
            })
            .collect();
        let points = convergence_points(&rows);
        assert_eq!(render_svg(&points), render_svg(&points));
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_convergence_csv(&a, &points).unwrap();
        write_convergence_csv(&b, &points).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
