//! Deterministic SVG rendering: scatter plots of sample clouds against
//! the target mixture, and loss-curve line charts. Output is plain text
//! with fixed formatting so identical inputs give identical bytes.

use std::fmt::Write as _;

use crate::data::MixtureSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const W: f64 = 640.0;
const H: f64 = 640.0;
const MARGIN: f64 = 40.0;

fn fmt(x: f64) -> String {
    // fixed decimal format keeps the output byte-stable across runs
    format!("{x:.4}")
}

/// Affine map from data space to pixel space, recorded in the SVG
/// header comment so plots can be parsed back in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotTransform {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl PlotTransform {
    pub fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = (W - 2.0 * MARGIN) / (self.x_max - self.x_min);
        let sy = (H - 2.0 * MARGIN) / (self.y_max - self.y_min);
        (
            MARGIN + (x - self.x_min) * sx,
            H - MARGIN - (y - self.y_min) * sy,
        )
    }

    pub fn from_px(&self, px: f64, py: f64) -> (f64, f64) {
        let sx = (W - 2.0 * MARGIN) / (self.x_max - self.x_min);
        let sy = (H - 2.0 * MARGIN) / (self.y_max - self.y_min);
        (
            self.x_min + (px - MARGIN) / sx,
            self.y_min + (H - MARGIN - py) / sy,
        )
    }
}

fn bounds(spec: &MixtureSpec) -> PlotTransform {
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in &spec.centers {
        x_min = x_min.min(c[0]);
        x_max = x_max.max(c[0]);
        y_min = y_min.min(c[1]);
        y_max = y_max.max(c[1]);
    }
    let pad = 0.5 + 3.0 * spec.std;
    PlotTransform {
        x_min: x_min - pad,
        x_max: x_max + pad,
        y_min: y_min - pad,
        y_max: y_max + pad,
    }
}

/// Scatter plot: mixture centers with 3-sigma circles, a subsample of
/// real points (grey) and generated points (red).
pub fn scatter_svg(
    spec: &MixtureSpec,
    real: &Tensor<f64>,
    generated: &Tensor<f64>,
    title: &str,
) -> Result<String> {
    if real.cols() != 2 || generated.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "scatter_svg",
            lhs: real.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    let t = bounds(spec);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(
        s,
        "<!-- transform x:[{},{}] y:[{},{}] margin:{} -->",
        fmt(t.x_min),
        fmt(t.x_max),
        fmt(t.y_min),
        fmt(t.y_max),
        fmt(MARGIN)
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{}</text>",
        fmt(MARGIN),
        escape(title)
    );
    // 3-sigma mode circles; radius in pixels uses the x scale
    let r_px = 3.0 * spec.std * (W - 2.0 * MARGIN) / (t.x_max - t.x_min);
    for c in &spec.centers {
        let (cx, cy) = t.to_px(c[0], c[1]);
        let _ = writeln!(
            s,
            "<circle class=\"mode\" cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"none\" stroke=\"#4080c0\" stroke-width=\"1\"/>",
            fmt(cx),
            fmt(cy),
            fmt(r_px)
        );
    }
    for (tensor, class, color) in [(real, "real", "#b0b0b0"), (generated, "gen", "#d03030")] {
        for i in 0..tensor.rows().min(2000) {
            let (px, py) = t.to_px(tensor.get2(i, 0), tensor.get2(i, 1));
            let _ = writeln!(
                s,
                "<circle class=\"{class}\" cx=\"{}\" cy=\"{}\" r=\"1.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>",
                fmt(px),
                fmt(py)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Parses the transform comment and all circles of a given class back
/// out of a scatter SVG, returning the data-space coordinates.
pub fn parse_scatter(svg: &str, class: &str) -> Result<(PlotTransform, Vec<(f64, f64)>)> {
    let line = svg
        .lines()
        .find(|l| l.starts_with("<!-- transform "))
        .ok_or_else(|| Error::Contract("scatter svg missing transform comment".into()))?;
    let grab = |key: &str| -> Result<(f64, f64)> {
        let tag = format!("{key}:[");
        let start = line
            .find(&tag)
            .ok_or_else(|| Error::Contract(format!("missing {key} range")))?
            + tag.len();
        let end = start
            + line[start..]
                .find(']')
                .ok_or_else(|| Error::Contract("unterminated range".into()))?;
        let mut parts = line[start..end].split(',');
        let lo = parts.next().unwrap_or("").trim().parse::<f64>();
        let hi = parts.next().unwrap_or("").trim().parse::<f64>();
        match (lo, hi) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(Error::Contract(format!("bad {key} range"))),
        }
    };
    let (x_min, x_max) = grab("x")?;
    let (y_min, y_max) = grab("y")?;
    let t = PlotTransform { x_min, x_max, y_min, y_max };

    let needle = format!("class=\"{class}\"");
    let mut points = Vec::new();
    for l in svg.lines() {
        if !l.contains(&needle) {
            continue;
        }
        let attr = |name: &str| -> Option<f64> {
            let tag = format!("{name}=\"");
            let start = l.find(&tag)? + tag.len();
            let end = start + l[start..].find('"')?;
            l[start..end].parse().ok()
        };
        if let (Some(px), Some(py)) = (attr("cx"), attr("cy")) {
            points.push(t.from_px(px, py));
        }
    }
    Ok((t, points))
}

/// Line chart of one or more named series over the step axis.
pub fn lines_svg(series: &[(&str, &[(f64, f64)])], title: &str) -> Result<String> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in *pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let t = PlotTransform { x_min, x_max, y_min, y_max };
    let palette = ["#d03030", "#3060c0", "#30a050", "#a050c0", "#c09030"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{}</text>",
        fmt(MARGIN),
        escape(title)
    );
    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = palette[idx % palette.len()];
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let (px, py) = t.to_px(x, y);
            let _ = write!(d, "{}{},{} ", if j == 0 { "M" } else { "L" }, fmt(px), fmt(py));
        }
        if !d.is_empty() {
            let _ = writeln!(
                s,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                d.trim_end()
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{}</text>",
            fmt(W - MARGIN - 120.0),
            fmt(24.0 + 16.0 * idx as f64),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
