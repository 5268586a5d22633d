//! Trajectory overlays: ground truth as solid lines, predictions dashed.

use std::fmt::Write as _;

use crate::dataset::{Scene, Window};

pub const TRAJECTORY_CSV_HEADER: &str = "window,ped,frame,kind,x,y";

/// Rows of `window,ped,frame,kind,x,y` with `kind` one of `observed`,
/// `truth` or `predicted`.
pub fn trajectory_csv(scene: &Scene, window: &Window, predicted: &[Vec<[f64; 2]>], obs_len: usize, seq_len: usize) -> String {
    let mut out = String::new();
    for (i, &t) in window.targets.iter().enumerate() {
        let ped = scene.tracks()[t].ped;
        for k in 0..seq_len {
            let frame = scene.frames()[window.start + k];
            if let Some(p) = window.position(scene, t, k) {
                let kind = if k < obs_len { "observed" } else { "truth" };
                let _ = writeln!(out, "{},{ped},{frame},{kind},{},{}", window.start, p[0], p[1]);
            }
            if k >= obs_len {
                if let Some(p) = predicted.get(i).and_then(|r| r.get(k - obs_len)) {
                    let _ = writeln!(out, "{},{ped},{frame},predicted,{},{}", window.start, p[0], p[1]);
                }
            }
        }
    }
    out
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// A standalone SVG of one window. World `y` points up.
pub fn window_svg(scene: &Scene, window: &Window, predicted: &[Vec<[f64; 2]>], obs_len: usize, seq_len: usize) -> String {
    let mut lines: Vec<(usize, Vec<[f64; 2]>, bool)> = Vec::new();
    for (i, &t) in window.targets.iter().enumerate() {
        let truth: Vec<[f64; 2]> = (0..seq_len).filter_map(|k| window.position(scene, t, k)).collect();
        let mut pred = vec![truth[obs_len.min(truth.len()) - 1]];
        pred.extend(predicted.get(i).into_iter().flatten().copied());
        lines.push((i, truth, false));
        lines.push((i, pred, true));
    }
    let pts = lines.iter().flat_map(|l| l.1.iter());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !lo[0].is_finite() {
        lo = [0.0, 0.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let (size, margin) = (480.0, 20.0);
    let k = (size - 2.0 * margin) / span;
    let tx = |p: [f64; 2]| (margin + (p[0] - lo[0]) * k, size - margin - (p[1] - lo[1]) * k);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"8\" y=\"14\" font-size=\"11\" font-family=\"sans-serif\">{} frame {}</text>\n",
        scene.name(),
        scene.frames()[window.start]
    );
    for (i, line, dashed) in &lines {
        let d: Vec<String> = line
            .iter()
            .map(|&p| {
                let (x, y) = tx(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let dash = if *dashed { " stroke-dasharray=\"5,4\"" } else { "" };
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"{dash}/>",
            d.join(" "),
            COLORS[i % COLORS.len()]
        );
    }
    svg.push_str("</svg>\n");
    svg
}
