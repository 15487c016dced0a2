//! Trace parsing and SVG rendering.

use anyhow::{anyhow, bail, Result};
use kinojgm::sim::TRACE_HEADER;
use plotters::prelude::*;

/// The trace columns the plots use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub reference: [f64; 3],
    pub e_true: [f64; 3],
    pub e_est: [f64; 3],
}

pub const PLOT_FILES: [&str; 4] = ["position_error.svg", "velocity.svg", "disturbance.svg", "overlay.svg"];

/// Reads a trace CSV. Errors name the offending row (1 = first data row).
pub fn parse_trace(text: &str) -> Result<Vec<TracePoint>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
    if header != expected {
        bail!("trace header does not match the trace schema");
    }
    let col = |name: &str| expected.iter().position(|c| *c == name).expect("known column");
    let idx = |names: [&str; 3]| names.map(col);
    let (t, p, v, r, et, ee) = (
        col("t"),
        idx(["px", "py", "pz"]),
        idx(["vx", "vy", "vz"]),
        idx(["rx", "ry", "rz"]),
        idx(["etx", "ety", "etz"]),
        idx(["eex", "eey", "eez"]),
    );
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| anyhow!("trace row {row}: {e}"))?;
        let get = |c: usize| -> Result<f64> {
            let s = rec.get(c).ok_or_else(|| anyhow!("trace row {row}: missing column {}", expected[c]))?;
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("trace row {row}: bad value '{s}' in column {}", expected[c]))
        };
        let get3 = |cs: [usize; 3]| -> Result<[f64; 3]> { Ok([get(cs[0])?, get(cs[1])?, get(cs[2])?]) };
        out.push(TracePoint {
            t: get(t)?,
            position: get3(p)?,
            velocity: get3(v)?,
            reference: get3(r)?,
            e_true: get3(et)?,
            e_est: get3(ee)?,
        });
    }
    if out.is_empty() {
        bail!("trace has no rows");
    }
    Ok(out)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        (lo - 1.0, lo + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

struct Series {
    label: &'static str,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for s in series {
            let color = s.color;
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(s.label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    Ok(svg)
}

fn lighter(c: RGBColor) -> RGBColor {
    let f = |v: u8| ((v as u16 + 255) / 2) as u8;
    RGBColor(f(c.0), f(c.1), f(c.2))
}

const AXIS_COLORS: [RGBColor; 3] = [RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(31, 119, 180)];

/// (file name, SVG text) for each of the four plots.
pub fn render_all(rows: &[TracePoint]) -> Result<Vec<(&'static str, String)>> {
    if rows.is_empty() {
        bail!("trace has no rows");
    }
    let err: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let d: f64 = (0..3).map(|a| (r.position[a] - r.reference[a]).powi(2)).sum();
            (r.t, d.sqrt())
        })
        .collect();
    let position_error = line_chart(
        "Position error",
        "time (s)",
        "position error (m)",
        &[Series { label: "|p - p_ref|", color: AXIS_COLORS[2], points: err }],
    )?;

    let names = ["vx", "vy", "vz"];
    let vel: Vec<Series> = (0..3)
        .map(|a| Series {
            label: names[a],
            color: AXIS_COLORS[a],
            points: rows.iter().map(|r| (r.t, r.velocity[a])).collect(),
        })
        .collect();
    let velocity = line_chart("Velocity", "time (s)", "velocity (m/s)", &vel)?;

    let true_names = ["true x", "true y", "true z"];
    let est_names = ["estimated x", "estimated y", "estimated z"];
    let mut dist = Vec::new();
    for a in 0..3 {
        dist.push(Series {
            label: true_names[a],
            color: AXIS_COLORS[a],
            points: rows.iter().map(|r| (r.t, r.e_true[a])).collect(),
        });
        dist.push(Series {
            label: est_names[a],
            color: lighter(AXIS_COLORS[a]),
            points: rows.iter().map(|r| (r.t, r.e_est[a])).collect(),
        });
    }
    let disturbance = line_chart("Disturbance", "time (s)", "disturbance (m/s^2)", &dist)?;

    let overlay = line_chart(
        "Top-down view",
        "x (m)",
        "y (m)",
        &[
            Series {
                label: "committed route",
                color: RGBColor(127, 127, 127),
                points: rows.iter().map(|r| (r.reference[0], r.reference[1])).collect(),
            },
            Series {
                label: "plant path",
                color: AXIS_COLORS[2],
                points: rows.iter().map(|r| (r.position[0], r.position[1])).collect(),
            },
        ],
    )?;
    Ok(vec![
        (PLOT_FILES[0], position_error),
        (PLOT_FILES[1], velocity),
        (PLOT_FILES[2], disturbance),
        (PLOT_FILES[3], overlay),
    ])
}
