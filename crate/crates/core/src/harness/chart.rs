//! Trace export: solver diagnostics as CSV, and a dependency-free SVG line
//! chart writer for quick visual inspection of convergence curves.

use crate::error::{Error, Result};
use crate::solvers::SolveTrace;

/// Serialize a trace as CSV with columns `iter,psnr,iterate_mse,objective`.
/// Cells for curves that were not recorded stay empty.
pub fn trace_to_csv(trace: &SolveTrace) -> String {
    let mut out = String::from("iter,psnr,iterate_mse,objective\n");
    for i in 0..trace.iterate_mse.len() {
        let psnr = trace.psnr.get(i).map(|v| v.to_string()).unwrap_or_default();
        let obj = trace.objective.get(i).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", i, psnr, trace.iterate_mse[i], obj));
    }
    out
}

/// Parse a trace CSV produced by [`trace_to_csv`].
pub fn parse_trace_csv(text: &str) -> Result<SolveTrace> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("");
    if header.trim() != "iter,psnr,iterate_mse,objective" {
        return Err(Error::Parse { offset: 0, msg: format!("unexpected header {header:?}") });
    }
    let mut trace = SolveTrace::new();
    let mut offset = header.len() + 1;
    for line in lines {
        let line_offset = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::Parse {
                offset: line_offset,
                msg: format!("expected 4 cells, got {}", cells.len()),
            });
        }
        let parse = |cell: &str, what: &str| -> Result<f64> {
            cell.parse::<f64>().map_err(|_| Error::Parse {
                offset: line_offset,
                msg: format!("bad {what} value {cell:?}"),
            })
        };
        if !cells[1].is_empty() {
            trace.psnr.push(parse(cells[1], "psnr")?);
        }
        trace.iterate_mse.push(parse(cells[2], "iterate_mse")?);
        if !cells[3].is_empty() {
            trace.objective.push(parse(cells[3], "objective")?);
        }
    }
    Ok(trace)
}

/// One named curve for the chart writer.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

const PALETTE: [&str; 6] =
    ["#1f6fb4", "#d1495b", "#3a7d44", "#8d6a9f", "#c88d2e", "#4a4a4a"];

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (0.01..10000.0).contains(&a) {
        format!("{v:.2}")
    } else {
        format!("{v:.2e}")
    }
}

/// Render named curves as a standalone SVG line chart. With `log_y` the
/// vertical axis is log10 and non-positive samples are dropped.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (width, height) = (760.0, 480.0);
    let (ml, mr, mt, mb) = (72.0, 24.0, 44.0, 48.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let map_y = |v: f64| -> Option<f64> {
        if log_y {
            if v > 0.0 && v.is_finite() {
                Some(v.log10())
            } else {
                None
            }
        } else if v.is_finite() {
            Some(v)
        } else {
            None
        }
    };

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut x_max = 1usize;
    for s in series {
        x_max = x_max.max(s.values.len().saturating_sub(1)).max(1);
        for &v in s.values {
            if let Some(t) = map_y(v) {
                y_min = y_min.min(t);
                y_max = y_max.max(t);
            }
        }
    }
    if !y_min.is_finite() || !y_max.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }

    let sx = |i: usize| ml + pw * i as f64 / x_max as f64;
    let sy = |t: f64| mt + ph * (1.0 - (t - y_min) / (y_max - y_min));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        ml + pw / 2.0,
        escape(title)
    ));

    for k in 0..5 {
        let t = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{ml:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            ml + pw
        ));
        let label = if log_y { format!("1e{t:.1}") } else { tick_label(t) };
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            ml - 6.0,
            y + 4.0,
            label
        ));
    }
    for k in 0..5 {
        let i = x_max * k / 4;
        let x = sx(i);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{i}</text>\n",
            mt + ph + 18.0
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ml:.1}\" y1=\"{mt:.1}\" x2=\"{ml:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(y_label)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">iteration</text>\n",
        ml + pw / 2.0,
        height - 12.0
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut points = String::new();
        for (i, &v) in s.values.iter().enumerate() {
            if let Some(t) = map_y(v) {
                points.push_str(&format!("{:.2},{:.2} ", sx(i), sy(t)));
            }
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.trim_end()
        ));
        let ly = mt + 16.0 + 16.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + pw - 130.0,
            ml + pw - 108.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
            ml + pw - 102.0,
            ly + 4.0,
            escape(s.name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trips() {
        let trace = SolveTrace {
            psnr: vec![20.5, 21.25, 22.0],
            iterate_mse: vec![1e-2, 1e-4, 1e-6],
            objective: vec![3.5, 2.25, 1.125],
        };
        let csv = trace_to_csv(&trace);
        let back = parse_trace_csv(&csv).unwrap();
        assert_eq!(back.psnr, trace.psnr);
        assert_eq!(back.iterate_mse, trace.iterate_mse);
        assert_eq!(back.objective, trace.objective);
        // Writing twice is byte-identical.
        assert_eq!(csv, trace_to_csv(&trace));
    }

    #[test]
    fn sparse_traces_leave_cells_empty() {
        let trace = SolveTrace {
            psnr: vec![],
            iterate_mse: vec![0.5, 0.25],
            objective: vec![],
        };
        let csv = trace_to_csv(&trace);
        assert!(csv.contains("0,,0.5,\n"));
        let back = parse_trace_csv(&csv).unwrap();
        assert!(back.psnr.is_empty());
        assert_eq!(back.iterate_mse, trace.iterate_mse);
    }

    #[test]
    fn malformed_trace_csv_is_rejected_with_offsets() {
        assert!(matches!(
            parse_trace_csv("wrong,header\n"),
            Err(Error::Parse { offset: 0, .. })
        ));
        let text = "iter,psnr,iterate_mse,objective\n0,1,2\n";
        match parse_trace_csv(text).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 32),
            other => panic!("unexpected {other:?}"),
        }
        let text = "iter,psnr,iterate_mse,objective\n0,abc,2,3\n";
        assert!(parse_trace_csv(text).is_err());
    }

    #[test]
    fn chart_contains_each_series_and_is_deterministic() {
        let a = [1.0, 2.0, 4.0, 8.0];
        let b = [8.0, 4.0, 2.0, 1.0];
        let series =
            [Series { name: "up", values: &a }, Series { name: "down", values: &b }];
        let svg = line_chart_svg("convergence", "psnr", &series, false);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("up"));
        assert!(svg.contains("down"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg, line_chart_svg("convergence", "psnr", &series, false));

        // Log mode drops non-positive samples instead of failing.
        let c = [1e-1, 0.0, 1e-5, -3.0, 1e-9];
        let svg = line_chart_svg("mse", "mse", &[Series { name: "m", values: &c }], true);
        assert!(svg.contains("1e"));
        let points = svg.split("points=\"").nth(1).unwrap();
        let count = points.split('"').next().unwrap().split(' ').count();
        assert_eq!(count, 3);
    }
}
