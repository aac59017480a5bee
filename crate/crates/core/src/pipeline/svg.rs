//! Tiny dependency-free SVG writers for run artifacts: line charts for
//! loss curves and a labelled grid for correlation heat maps.

use std::fmt::Write as _;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn nice_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// One polyline per series over a shared index axis. Gaps (`NaN`) split a
/// polyline instead of plotting a bogus vertex.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (720.0, 400.0);
    let (ml, mr, mt, mb) = (64.0, 16.0, 40.0, 44.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let n_max = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0);
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let sx = |i: usize| ml + pw * (i as f64) / ((n_max.max(2) - 1) as f64);
    let sy = |v: f64| mt + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        w / 2.0,
        title
    );

    // Frame + horizontal grid lines with value labels.
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = fmt2(sy(v));
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>",
            fmt2(ml),
            fmt2(ml + pw)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fmt2(ml - 6.0),
            fmt2(sy(v) + 4.0),
            nice_label(v)
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        fmt2(ml),
        fmt2(mt),
        fmt2(pw),
        fmt2(ph)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        fmt2(ml + pw / 2.0),
        fmt2(h - 12.0),
        x_label
    );

    for (si, (label, ys)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut points = String::new();
        let mut runs: Vec<String> = Vec::new();
        for (i, &v) in ys.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(points, "{},{} ", fmt2(sx(i)), fmt2(sy(v)));
            } else if !points.is_empty() {
                runs.push(std::mem::take(&mut points));
            }
        }
        if !points.is_empty() {
            runs.push(points);
        }
        for run in runs {
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>",
                run.trim_end()
            );
        }
        // Legend swatch.
        let ly = mt + 8.0 + 16.0 * si as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>",
            fmt2(ml + pw - 150.0),
            fmt2(ly)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            fmt2(ml + pw - 132.0),
            fmt2(ly + 6.0),
            label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// White-to-blue ramp for values in `[0, 1]`.
fn ramp(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 - 224.0 * v).round() as u8;
    let g = (255.0 - 136.0 * v).round() as u8;
    let b = (255.0 - 75.0 * v).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Labelled correlation grid: `values[row][col]` in `[0, 1]`.
pub fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let cell = 22.0;
    let (ml, mt) = (120.0, 120.0);
    let w = ml + cell * cols.len() as f64 + 20.0;
    let h = mt + cell * rows.len() as f64 + 20.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"10\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"8\" y=\"18\" font-size=\"14\">{title}</text>");

    for (ci, name) in cols.iter().enumerate() {
        let x = ml + cell * (ci as f64 + 0.5);
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"start\" \
             transform=\"rotate(-60 {x} {})\">{name}</text>",
            fmt2(mt - 6.0),
            fmt2(mt - 6.0)
        );
    }
    for (ri, name) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{name}</text>",
            fmt2(ml - 6.0),
            fmt2(mt + cell * (ri as f64 + 0.5) + 3.0)
        );
    }
    for (ri, row) in values.iter().enumerate() {
        for (ci, &v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"{}\" stroke=\"#fff\"/>",
                fmt2(ml + cell * ci as f64),
                fmt2(mt + cell * ri as f64),
                ramp(v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed_and_splits_on_gaps() {
        let svg = line_chart(
            "losses",
            "epoch",
            &[
                ("train".into(), vec![1.0, 0.5, 0.4, 0.35]),
                ("val".into(), vec![1.1, f64::NAN, 0.5, 0.45]),
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // Gap splits the second series into two polylines: 3 in total.
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("train") && svg.contains("val"));
    }

    #[test]
    fn heatmap_emits_one_cell_per_value() {
        let svg = heatmap(
            "c",
            &["a".into(), "b".into()],
            &["x".into(), "y".into(), "z".into()],
            &[vec![0.0, 0.5, 1.0], vec![1.0, 0.2, 0.3]],
        );
        assert_eq!(svg.matches("<rect").count(), 1 + 6); // background + cells
        assert!(svg.contains(&ramp(1.0)));
        assert!(svg.contains(&ramp(0.0)));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#ffffff");
        assert_eq!(ramp(1.0), "#1f77b4");
        assert_eq!(ramp(2.0), "#1f77b4");
    }
}
